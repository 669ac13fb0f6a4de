//! Checkpoint container: magic `CKPT1\n`, an 8-byte little-endian length,
//! a JSON manifest (architecture config, ordered entry names/shapes/dtype,
//! epoch, metrics), then raw little-endian f32 arrays concatenated in
//! manifest order. Parameters come first, then normalization running
//! buffers, then optional optimizer slots.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer, OptimKind, SgdNesterov};
use crate::tensor::{s, Scalar, Tensor};

use super::{Arch, Model, NormBuffer};

pub const MAGIC: &[u8; 6] = b"CKPT1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    NormMean,
    NormVar,
    Optimizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    architecture: Arch,
    in_channels: usize,
    width_scale: f64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    optimizer: Option<OptimKind>,
    optimizer_lr: Option<f64>,
    adam_steps: Option<u64>,
    entries: Vec<Entry>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint<T: Scalar> {
    pub model: Model<T>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub optimizer: Option<Optimizer<T>>,
}

fn cast_f32<T: Scalar>(v: T) -> f32 {
    num_traits::cast::<T, f32>(v).unwrap_or(f32::NAN)
}

fn write_array<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    for &v in t.data() {
        w.write_all(&cast_f32(v).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    epoch: usize,
    metrics: &BTreeMap<String, f64>,
    optimizer: Option<&Optimizer<T>>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut arrays: Vec<Tensor<T>> = Vec::new();
    for (name, t) in model.store().iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            role: Role::Param,
        });
        arrays.push(t.clone());
    }
    for buf in model.norm_buffers() {
        for (suffix, data, role) in [
            ("mean", &buf.mean, Role::NormMean),
            ("var", &buf.var, Role::NormVar),
        ] {
            entries.push(Entry {
                name: format!("{}.{suffix}", buf.name),
                shape: vec![data.len()],
                dtype: "f32".into(),
                role,
            });
            arrays.push(Tensor::new(&[data.len()], data.clone())?);
        }
    }
    let mut adam_steps = None;
    if let Some(opt) = optimizer {
        if let Optimizer::Adam(a) = opt {
            adam_steps = Some(a.steps_taken());
        }
        for (name, t) in opt.state() {
            if name == "t" {
                continue;
            }
            entries.push(Entry {
                name: format!("opt.{name}"),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                role: Role::Optimizer,
            });
            arrays.push(t);
        }
    }

    let manifest = Manifest {
        architecture: model.arch(),
        in_channels: model.in_channels(),
        width_scale: model.width_scale(),
        epoch,
        metrics: metrics.clone(),
        optimizer: optimizer.map(|o| o.kind()),
        optimizer_lr: optimizer.map(|o| num_traits::cast::<T, f64>(o.lr()).unwrap_or(0.0)),
        adam_steps,
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint { name: "manifest".into(), msg: e.to_string() })?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for t in &arrays {
            write_array(&mut w, t)?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}", self.at),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn array<T: Scalar>(&mut self, entry: &Entry) -> Result<Tensor<T>> {
        let numel: usize = entry.shape.iter().product();
        let raw = self.take(4 * numel)?;
        let mut data = Vec::with_capacity(numel);
        for c in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            data.push(s::<T>(v as f64));
        }
        Tensor::new(&entry.shape, data)
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0, path };

    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint file"));
    }
    let len_bytes = r.take(8)?;
    let manifest_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(manifest_len)?)
        .map_err(|e| Error::format(path, format!("manifest: {e}")))?;

    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint {
                name: e.name.clone(),
                msg: format!("unsupported dtype {:?}", e.dtype),
            });
        }
    }

    let mut model: Model<T> =
        Model::build(manifest.architecture, manifest.in_channels, manifest.width_scale, 0)?;

    let mut entry_at = 0usize;
    let n_params = model.store().len();
    for i in 0..n_params {
        let entry = manifest.entries.get(entry_at).ok_or_else(|| Error::Checkpoint {
            name: model.store().name(super::ParamId(i)).to_string(),
            msg: "missing from manifest".into(),
        })?;
        entry_at += 1;
        let (want_name, want_shape) = {
            let id = super::ParamId(i);
            (model.store().name(id).to_string(), model.store().tensor(id).shape().to_vec())
        };
        if entry.role != Role::Param || entry.name != want_name {
            return Err(Error::Checkpoint {
                name: entry.name.clone(),
                msg: format!("expected parameter {want_name} at manifest position {}", entry_at - 1),
            });
        }
        if entry.shape != want_shape {
            return Err(Error::Checkpoint {
                name: entry.name.clone(),
                msg: format!("shape {:?} does not match built shape {:?}", entry.shape, want_shape),
            });
        }
        let t = r.array::<T>(entry)?;
        model.store_mut().set(super::ParamId(i), t);
    }

    let mut buffers: Vec<NormBuffer<T>> = Vec::new();
    while entry_at < manifest.entries.len() && manifest.entries[entry_at].role == Role::NormMean {
        let mean_entry = manifest.entries[entry_at].clone();
        let var_entry = manifest.entries.get(entry_at + 1).cloned().ok_or_else(|| {
            Error::Checkpoint { name: mean_entry.name.clone(), msg: "mean without var".into() }
        })?;
        if var_entry.role != Role::NormVar {
            return Err(Error::Checkpoint {
                name: var_entry.name.clone(),
                msg: "expected a running-var entry".into(),
            });
        }
        entry_at += 2;
        let mean = r.array::<T>(&mean_entry)?;
        let var = r.array::<T>(&var_entry)?;
        let name = mean_entry.name.trim_end_matches(".mean").to_string();
        buffers.push(NormBuffer { name, mean: mean.data().to_vec(), var: var.data().to_vec() });
    }
    model.set_norm_buffers(&buffers)?;

    let optimizer = match manifest.optimizer {
        None => None,
        Some(kind) => {
            let lr = s::<T>(manifest.optimizer_lr.unwrap_or(0.0));
            let mut slots = Vec::new();
            while entry_at < manifest.entries.len() {
                let entry = &manifest.entries[entry_at];
                if entry.role != Role::Optimizer {
                    return Err(Error::Checkpoint {
                        name: entry.name.clone(),
                        msg: "unexpected entry after optimizer block".into(),
                    });
                }
                entry_at += 1;
                slots.push(r.array::<T>(entry)?);
            }
            Some(match kind {
                OptimKind::SgdNesterov => {
                    let mut o = SgdNesterov::new(lr, s(0.99));
                    o.load_state(slots)?;
                    Optimizer::Sgd(o)
                }
                OptimKind::Adam => {
                    let mut o = Adam::new(lr);
                    let half = slots.len() / 2;
                    let v = slots.split_off(half);
                    o.load_state(manifest.adam_steps.unwrap_or(0), slots, v)?;
                    Optimizer::Adam(o)
                }
            })
        }
    };

    if entry_at != manifest.entries.len() {
        return Err(Error::Checkpoint {
            name: manifest.entries[entry_at].name.clone(),
            msg: "entry not consumed by any section".into(),
        });
    }

    Ok(LoadedCheckpoint { model, epoch: manifest.epoch, metrics: manifest.metrics, optimizer })
}
