//! Dual-resolution patch network: two weight-independent pathways of
//! eight valid 3x3x3 convs (batchnorm, relu, light dropout after each),
//! the low-resolution branch upsampled x3 and concatenated, then two 1x1x1
//! fully-connected convs and a biased classification conv with softmax.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{
    batchnorm_infer, batchnorm_train, concat_channels, conv1, conv3d, dropout, relu,
    softmax_channels, upsample3, BnState, Mode, Padding,
};
use crate::tensor::{s, Scalar, Tape, Tensor, Var};

use super::{he_init, layer_rng, scale_width, Fwd, NormBuffer, ParamId, ParamStore};

/// Reference pathway widths before scaling.
pub const PATH_WIDTHS: [usize; 8] = [30, 30, 40, 40, 40, 40, 50, 50];
/// Reference fully-connected widths before scaling.
pub const FC_WIDTHS: [usize; 2] = [150, 150];
/// Dropout after every pathway conv.
pub const PATH_DROPOUT: f64 = 0.02;
/// Dropout after every fully-connected conv.
pub const FC_DROPOUT: f64 = 0.5;
/// Spatial shrink across one pathway: eight valid 3x3x3 convs.
pub const EXTENT_SHRINK: usize = 16;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct ConvBn<T: Scalar> {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    state: BnState<T>,
    rate: f64,
}

#[derive(Debug, Clone)]
pub struct DeepMedicNet<T: Scalar> {
    pub store: ParamStore<T>,
    pub in_channels: usize,
    pub width: f64,
    hi: Vec<ConvBn<T>>,
    lo: Vec<ConvBn<T>>,
    fc: Vec<ConvBn<T>>,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl<T: Scalar> DeepMedicNet<T> {
    pub fn build(in_channels: usize, width: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layer = 0u64;
        let mut make_path = |store: &mut ParamStore<T>, prefix: &str| -> Result<Vec<ConvBn<T>>> {
            let mut prev = in_channels;
            let mut path = Vec::with_capacity(PATH_WIDTHS.len());
            for (i, &base) in PATH_WIDTHS.iter().enumerate() {
                let ch = scale_width(base, width);
                let mut rng = layer_rng(seed, layer);
                layer += 1;
                let w = store.push(
                    format!("{prefix}.conv{i}.w"),
                    he_init(&[ch, prev, 3, 3, 3], &mut rng)?,
                );
                let gamma = store.push(format!("{prefix}.conv{i}.gamma"), Tensor::full(&[ch], T::one()));
                let beta = store.push(format!("{prefix}.conv{i}.beta"), Tensor::zeros(&[ch]));
                path.push(ConvBn { w, gamma, beta, state: BnState::new(ch), rate: PATH_DROPOUT });
                prev = ch;
            }
            Ok(path)
        };
        let hi = make_path(&mut store, "hi")?;
        let lo = make_path(&mut store, "lo")?;

        let last = scale_width(*PATH_WIDTHS.last().unwrap(), width);
        let mut prev = 2 * last;
        let mut fc = Vec::with_capacity(FC_WIDTHS.len());
        for (i, &base) in FC_WIDTHS.iter().enumerate() {
            let ch = scale_width(base, width);
            let mut rng = layer_rng(seed, layer);
            layer += 1;
            let w = store.push(format!("fc{i}.w"), he_init(&[ch, prev, 1, 1, 1], &mut rng)?);
            let gamma = store.push(format!("fc{i}.gamma"), Tensor::full(&[ch], T::one()));
            let beta = store.push(format!("fc{i}.beta"), Tensor::zeros(&[ch]));
            fc.push(ConvBn { w, gamma, beta, state: BnState::new(ch), rate: FC_DROPOUT });
            prev = ch;
        }

        let mut rng = layer_rng(seed, layer);
        let cls_w = store.push("classifier.w", he_init(&[2, prev, 1, 1, 1], &mut rng)?);
        let cls_b = store.push("classifier.b", Tensor::zeros(&[2]));

        Ok(Self { store, in_channels, width, hi, lo, fc, cls_w, cls_b })
    }

    /// Low-resolution context extent required alongside a given
    /// high-resolution patch extent, per axis.
    pub fn lo_extent(hi_extent: usize) -> Result<usize> {
        if hi_extent <= EXTENT_SHRINK {
            return Err(Error::invalid(
                "deepmedic",
                format!("patch extent {hi_extent} leaves no output after eight valid convs"),
            ));
        }
        let out = hi_extent - EXTENT_SHRINK;
        if out % 3 != 0 {
            return Err(Error::invalid(
                "deepmedic",
                format!("output extent {out} must divide by 3 to align the upsampled pathway"),
            ));
        }
        Ok(out / 3 + EXTENT_SHRINK)
    }

    fn run_path(
        layers: &mut [ConvBn<T>],
        store_vars: &[Var<T>],
        tape: Option<&Tape<T>>,
        x: &Var<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<T>> {
        let mut cur = x.clone();
        for layer in layers.iter_mut() {
            let conv = conv3d(tape, &cur, &store_vars[layer.w.index()], None, Padding::Valid)?;
            let normed = match mode {
                Mode::Train => batchnorm_train(
                    tape,
                    &conv,
                    &store_vars[layer.gamma.index()],
                    &store_vars[layer.beta.index()],
                    &mut layer.state,
                    s(BN_EPS),
                    s(BN_MOMENTUM),
                )?,
                Mode::Infer => batchnorm_infer(
                    tape,
                    &conv,
                    &store_vars[layer.gamma.index()],
                    &store_vars[layer.beta.index()],
                    &layer.state,
                    s(BN_EPS),
                )?,
            };
            let act = relu(tape, &normed)?;
            cur = dropout(tape, &act, s(layer.rate), mode, rng)?;
        }
        Ok(cur)
    }

    /// Features of the high-resolution pathway alone (the pre-concat
    /// activations), for receptive-field probes.
    pub fn hi_features(
        &mut self,
        tape: Option<&Tape<T>>,
        hi: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<T>> {
        let vars = self.store.vars(tape);
        let x = Var::constant(hi.clone());
        Self::run_path(&mut self.hi, &vars, tape, &x, mode, rng)
    }

    /// `hi` is the full-resolution patch batch, `lo` the context batch
    /// already downsampled x3. Returns `[B,2]`-channel probabilities over
    /// the patch extent minus 16.
    pub fn forward(
        &mut self,
        tape: Option<&Tape<T>>,
        hi: &Tensor<T>,
        lo: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Fwd<T>> {
        let [hb, hc, hx, hy, hz] = hi.dims5()?;
        let [lb, lc, lx, ly, lz] = lo.dims5()?;
        if hb != lb {
            return Err(Error::ShapeMismatch { op: "deepmedic", axis: "batch".into(), expected: hb, got: lb });
        }
        for (c, which) in [(hc, "patch"), (lc, "context")] {
            if c != self.in_channels {
                return Err(Error::ShapeMismatch {
                    op: "deepmedic",
                    axis: format!("{which} channels"),
                    expected: self.in_channels,
                    got: c,
                });
            }
        }
        for (axis, he, le) in [("x", hx, lx), ("y", hy, ly), ("z", hz, lz)] {
            let want = Self::lo_extent(he)?;
            if le != want {
                return Err(Error::ShapeMismatch {
                    op: "deepmedic",
                    axis: format!("context {axis}"),
                    expected: want,
                    got: le,
                });
            }
        }

        let vars = self.store.vars(tape);
        let hi_in = Var::constant(hi.clone());
        let lo_in = Var::constant(lo.clone());
        let hi_out = Self::run_path(&mut self.hi, &vars, tape, &hi_in, mode, rng)?;
        let lo_out = Self::run_path(&mut self.lo, &vars, tape, &lo_in, mode, rng)?;
        let lo_up = upsample3(tape, &lo_out)?;
        let mut cur = concat_channels(tape, &[&hi_out, &lo_up])?;

        for layer in self.fc.iter_mut() {
            let conv = conv1(tape, &cur, &vars[layer.w.index()], None)?;
            let normed = match mode {
                Mode::Train => batchnorm_train(
                    tape,
                    &conv,
                    &vars[layer.gamma.index()],
                    &vars[layer.beta.index()],
                    &mut layer.state,
                    s(BN_EPS),
                    s(BN_MOMENTUM),
                )?,
                Mode::Infer => batchnorm_infer(
                    tape,
                    &conv,
                    &vars[layer.gamma.index()],
                    &vars[layer.beta.index()],
                    &layer.state,
                    s(BN_EPS),
                )?,
            };
            let act = relu(tape, &normed)?;
            cur = dropout(tape, &act, s(layer.rate), mode, rng)?;
        }

        let logits = conv1(tape, &cur, &vars[self.cls_w.index()], Some(&vars[self.cls_b.index()]))?;
        let probs = softmax_channels(tape, &logits)?;
        Ok(Fwd { probs, params: vars })
    }

    pub fn norm_buffers(&self) -> Vec<NormBuffer<T>> {
        let mut out = Vec::new();
        for (prefix, layers) in [("hi", &self.hi), ("lo", &self.lo), ("fc", &self.fc)] {
            for (i, layer) in layers.iter().enumerate() {
                let name = if prefix == "fc" {
                    format!("fc{i}.bn")
                } else {
                    format!("{prefix}.conv{i}.bn")
                };
                out.push(NormBuffer {
                    name,
                    mean: layer.state.running_mean.clone(),
                    var: layer.state.running_var.clone(),
                });
            }
        }
        out
    }

    pub fn set_norm_buffers(&mut self, buffers: &[NormBuffer<T>]) -> Result<()> {
        let mut want: Vec<(&str, &mut ConvBn<T>)> = Vec::new();
        for layer in &mut self.hi {
            want.push(("hi", layer));
        }
        for layer in &mut self.lo {
            want.push(("lo", layer));
        }
        for layer in &mut self.fc {
            want.push(("fc", layer));
        }
        if buffers.len() != want.len() {
            return Err(Error::invalid(
                "norm_buffers",
                format!("expected {} buffers, got {}", want.len(), buffers.len()),
            ));
        }
        for (buf, (_, layer)) in buffers.iter().zip(want) {
            if buf.mean.len() != layer.state.running_mean.len() {
                return Err(Error::invalid(
                    "norm_buffers",
                    format!(
                        "buffer {} holds {} channels, layer expects {}",
                        buf.name,
                        buf.mean.len(),
                        layer.state.running_mean.len()
                    ),
                ));
            }
            layer.state.running_mean = buf.mean.clone();
            layer.state.running_var = buf.var.clone();
        }
        Ok(())
    }
}
