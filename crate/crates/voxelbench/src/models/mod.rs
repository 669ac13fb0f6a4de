//! Network construction, initialization, width scaling, and parameter
//! bookkeeping for the two segmentation architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::Mode;
use crate::tensor::{s, Grads, Scalar, Tape, Tensor, Var};

pub mod checkpoint;
mod deepmedic;
mod unet;

pub use deepmedic::DeepMedicNet;
pub use unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Deepmedic,
    Unet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Deepmedic => "deepmedic",
            Arch::Unet => "unet",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(v: &str) -> Result<Self> {
        match v {
            "deepmedic" => Ok(Arch::Deepmedic),
            "unet" => Ok(Arch::Unet),
            other => Err(Error::invalid(
                "arch",
                format!("unknown architecture {other:?}, expected deepmedic or unet"),
            )),
        }
    }
}

/// Apply the width multiplier to a reference channel count: nearest
/// integer, never below one.
pub fn scale_width(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

fn check_build(in_channels: usize, width: f64) -> Result<()> {
    if !(1..=4).contains(&in_channels) {
        return Err(Error::invalid(
            "build",
            format!("in_channels must be 1..=4, got {in_channels}"),
        ));
    }
    if !(width.is_finite() && width > 0.0) {
        return Err(Error::invalid(
            "build",
            format!("width_scale must be a positive finite number, got {width}"),
        ));
    }
    Ok(())
}

/// Kernel initialization: i.i.d. normal with variance `2 / (Cin * k^3)`.
pub fn he_init<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if shape.len() != 5 {
        return Err(Error::invalid(
            "he_init",
            format!("expected a [Cout,Cin,k,k,k] shape, got {shape:?}"),
        ));
    }
    let fan_in: usize = shape[1] * shape[2] * shape[3] * shape[4];
    if fan_in == 0 {
        return Err(Error::invalid("he_init", "zero fan-in"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Ok(Tensor::from_fn(shape, |_| s::<T>(normal.sample(rng))))
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order; also the index into [`ParamStore::vars`].
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Flat ordered list of named trainable tensors. The order is the
/// contract shared by optimizers, checkpoints, and gradient collection.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        self.tensors[id.0] = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replace every tensor at once, in store order. Shapes must match.
    pub fn set_all(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid(
                "param_store",
                format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()),
            ));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::invalid(
                    "param_store",
                    format!(
                        "parameter {}: shape {:?} cannot replace {:?}",
                        self.names[i],
                        t.shape(),
                        self.tensors[i].shape()
                    ),
                ));
            }
        }
        self.tensors = tensors.to_vec();
        Ok(())
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// One `Var` per parameter, in store order: watched when a tape is
    /// given, plain constants otherwise.
    pub fn vars(&self, tape: Option<&Tape<T>>) -> Vec<Var<T>> {
        match tape {
            Some(tape) => self.tensors.iter().map(|t| tape.watch(t.clone())).collect(),
            None => self.tensors.iter().map(|t| Var::constant(t.clone())).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward result: class probabilities plus the parameter `Var`s in
/// store order, so gradients can be pulled out after `backward`.
#[derive(Debug)]
pub struct Fwd<T: Scalar> {
    pub probs: Var<T>,
    pub params: Vec<Var<T>>,
}

/// Gradients in store order; parameters the loss never touched get zero.
pub fn collect_grads<T: Scalar>(grads: &mut Grads<T>, params: &[Var<T>]) -> Vec<Tensor<T>> {
    params
        .iter()
        .map(|p| grads.take(p).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// A batch-norm layer's running buffers, flattened for serialization.
#[derive(Debug, Clone)]
pub struct NormBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Either architecture behind one face for counting, checkpointing, and
/// optimizer plumbing. Forward passes stay architecture-specific because
/// the two nets take different inputs.
#[derive(Debug, Clone)]
pub enum Model<T: Scalar> {
    Deepmedic(DeepMedicNet<T>),
    Unet(UNet<T>),
}

impl<T: Scalar> Model<T> {
    pub fn build(arch: Arch, in_channels: usize, width: f64, seed: u64) -> Result<Self> {
        check_build(in_channels, width)?;
        Ok(match arch {
            Arch::Deepmedic => Model::Deepmedic(DeepMedicNet::build(in_channels, width, seed)?),
            Arch::Unet => Model::Unet(UNet::build(in_channels, width, seed)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Deepmedic(_) => Arch::Deepmedic,
            Model::Unet(_) => Arch::Unet,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Model::Deepmedic(m) => m.in_channels,
            Model::Unet(m) => m.in_channels,
        }
    }

    pub fn width_scale(&self) -> f64 {
        match self {
            Model::Deepmedic(m) => m.width,
            Model::Unet(m) => m.width,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Model::Deepmedic(m) => &m.store,
            Model::Unet(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Deepmedic(m) => &mut m.store,
            Model::Unet(m) => &mut m.store,
        }
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store().total_scalars()
    }

    /// Name and shape of every trainable tensor, in store order.
    pub fn list_parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.store()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Running normalization buffers (empty for the instance-norm net).
    pub fn norm_buffers(&self) -> Vec<NormBuffer<T>> {
        match self {
            Model::Deepmedic(m) => m.norm_buffers(),
            Model::Unet(_) => Vec::new(),
        }
    }

    pub fn set_norm_buffers(&mut self, buffers: &[NormBuffer<T>]) -> Result<()> {
        match self {
            Model::Deepmedic(m) => m.set_norm_buffers(buffers),
            Model::Unet(_) => {
                if buffers.is_empty() {
                    Ok(())
                } else {
                    Err(Error::invalid("norm_buffers", "this architecture keeps no running buffers"))
                }
            }
        }
    }

    /// Full-batch forward for the full-volume net; rejects the patch net.
    pub fn forward_volume(
        &mut self,
        tape: Option<&Tape<T>>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Fwd<T>> {
        match self {
            Model::Unet(m) => m.forward(tape, x, mode, rng),
            Model::Deepmedic(_) => Err(Error::invalid(
                "forward_volume",
                "this architecture takes patch pairs; use forward_patches",
            )),
        }
    }

    /// Dual-input forward for the patch net; rejects the full-volume net.
    pub fn forward_patches(
        &mut self,
        tape: Option<&Tape<T>>,
        hi: &Tensor<T>,
        lo: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Fwd<T>> {
        match self {
            Model::Deepmedic(m) => m.forward(tape, hi, lo, mode, rng),
            Model::Unet(_) => Err(Error::invalid(
                "forward_patches",
                "this architecture takes whole volumes; use forward_volume",
            )),
        }
    }
}

/// Deterministic per-layer init stream: one seed, one stream per layer.
pub(crate) fn layer_rng(seed: u64, layer: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer);
    rng
}
