//! Full-volume encoder-decoder: four two-conv blocks with x3 maxpools
//! between them, a decoder of x3 upsamplings each followed by a
//! channel-halving 1x1x1 conv and a skip concatenation, two 1x1x1
//! fully-connected convs with heavy dropout, and a biased classifier.
//! All 3x3x3 convs are same-padded; instance norm and relu follow every
//! conv. Arbitrary extents are handled by zero-padding each axis up to
//! the next multiple of 27 and cropping the logits back.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{
    concat_channels, conv1, conv3d, crop3, dropout, instancenorm, maxpool3, pad3, relu,
    softmax_channels, upsample3, Mode, Padding,
};
use crate::tensor::{s, Scalar, Tape, Tensor, Var};

use super::{he_init, layer_rng, scale_width, Fwd, ParamId, ParamStore};

/// Reference widths of the two convs in each encoder block.
pub const ENC_WIDTHS: [[usize; 2]; 4] = [[20, 40], [40, 80], [80, 160], [160, 320]];
/// Reference widths after each decoder upsampling (the halving conv).
pub const DEC_HALVED: [usize; 3] = [160, 40, 20];
/// Reference widths of the two convs in each decoder block.
pub const DEC_WIDTHS: [usize; 3] = [80, 40, 20];
/// Reference fully-connected width.
pub const FC_WIDTH: usize = 20;
/// Dropout after each fully-connected conv.
pub const FC_DROPOUT: f64 = 0.5;
/// Input extents are padded up to the next multiple of this.
pub const EXTENT_MULTIPLE: usize = 27;

const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ConvIn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    pub store: ParamStore<T>,
    pub in_channels: usize,
    pub width: f64,
    enc: Vec<[ConvIn; 2]>,
    dec_halve: Vec<ConvIn>,
    dec_block: Vec<[ConvIn; 2]>,
    fc: Vec<ConvIn>,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl<T: Scalar> UNet<T> {
    pub fn build(in_channels: usize, width: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layer = 0u64;
        let mut conv = |store: &mut ParamStore<T>, name: String, cin: usize, cout: usize, k: usize| -> Result<ConvIn> {
            let mut rng = layer_rng(seed, layer);
            layer += 1;
            let w = store.push(format!("{name}.w"), he_init(&[cout, cin, k, k, k], &mut rng)?);
            let gamma = store.push(format!("{name}.gamma"), Tensor::full(&[cout], T::one()));
            let beta = store.push(format!("{name}.beta"), Tensor::zeros(&[cout]));
            Ok(ConvIn { w, gamma, beta })
        };

        let mut prev = in_channels;
        let mut enc = Vec::with_capacity(4);
        for (b, pair) in ENC_WIDTHS.iter().enumerate() {
            let c0 = scale_width(pair[0], width);
            let c1 = scale_width(pair[1], width);
            let a = conv(&mut store, format!("enc{b}.conv0"), prev, c0, 3)?;
            let bb = conv(&mut store, format!("enc{b}.conv1"), c0, c1, 3)?;
            enc.push([a, bb]);
            prev = c1;
        }
        let skips = [
            scale_width(ENC_WIDTHS[2][1], width),
            scale_width(ENC_WIDTHS[1][1], width),
            scale_width(ENC_WIDTHS[0][1], width),
        ];

        let mut dec_halve = Vec::with_capacity(3);
        let mut dec_block = Vec::with_capacity(3);
        for d in 0..3 {
            let halved = scale_width(DEC_HALVED[d], width);
            let h = conv(&mut store, format!("dec{d}.halve"), prev, halved, 1)?;
            dec_halve.push(h);
            let cat = halved + skips[d];
            let cw = scale_width(DEC_WIDTHS[d], width);
            let a = conv(&mut store, format!("dec{d}.conv0"), cat, cw, 3)?;
            let b = conv(&mut store, format!("dec{d}.conv1"), cw, cw, 3)?;
            dec_block.push([a, b]);
            prev = cw;
        }

        let fcw = scale_width(FC_WIDTH, width);
        let fc = vec![
            conv(&mut store, "fc0".to_string(), prev, fcw, 1)?,
            conv(&mut store, "fc1".to_string(), fcw, fcw, 1)?,
        ];

        let mut rng = layer_rng(seed, layer);
        let cls_w = store.push("classifier.w", he_init(&[2, fcw, 1, 1, 1], &mut rng)?);
        let cls_b = store.push("classifier.b", Tensor::zeros(&[2]));

        Ok(Self { store, in_channels, width, enc, dec_halve, dec_block, fc, cls_w, cls_b })
    }

    fn conv_in_relu(
        layer: &ConvIn,
        vars: &[Var<T>],
        tape: Option<&Tape<T>>,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        let w = &vars[layer.w.index()];
        let conv = if w.shape()[2] == 1 {
            conv1(tape, x, w, None)?
        } else {
            conv3d(tape, x, w, None, Padding::Same)?
        };
        let normed = instancenorm(
            tape,
            &conv,
            &vars[layer.gamma.index()],
            &vars[layer.beta.index()],
            s(IN_EPS),
        )?;
        relu(tape, &normed)
    }

    pub fn forward(
        &mut self,
        tape: Option<&Tape<T>>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Fwd<T>> {
        let [_, c, xd, yd, zd] = x.dims5()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet",
                axis: "channels".into(),
                expected: self.in_channels,
                got: c,
            });
        }
        let vars = self.store.vars(tape);
        let mut cur = Var::constant(x.clone());
        let pad_hi = [xd, yd, zd].map(|e| (EXTENT_MULTIPLE - e % EXTENT_MULTIPLE) % EXTENT_MULTIPLE);
        let padded = pad_hi.iter().any(|&p| p > 0);
        if padded {
            cur = pad3(tape, &cur, [0; 3], pad_hi)?;
        }

        let mut skips = Vec::with_capacity(3);
        for (b, block) in self.enc.iter().enumerate() {
            cur = Self::conv_in_relu(&block[0], &vars, tape, &cur)?;
            cur = Self::conv_in_relu(&block[1], &vars, tape, &cur)?;
            if b < 3 {
                skips.push(cur.clone());
                cur = maxpool3(tape, &cur)?;
            }
        }

        for d in 0..3 {
            cur = upsample3(tape, &cur)?;
            cur = Self::conv_in_relu(&self.dec_halve[d], &vars, tape, &cur)?;
            let skip = &skips[2 - d];
            cur = concat_channels(tape, &[&cur, skip])?;
            cur = Self::conv_in_relu(&self.dec_block[d][0], &vars, tape, &cur)?;
            cur = Self::conv_in_relu(&self.dec_block[d][1], &vars, tape, &cur)?;
        }

        for layer in &self.fc {
            cur = Self::conv_in_relu(layer, &vars, tape, &cur)?;
            cur = dropout(tape, &cur, s(FC_DROPOUT), mode, rng)?;
        }

        let mut logits = conv1(tape, &cur, &vars[self.cls_w.index()], Some(&vars[self.cls_b.index()]))?;
        if padded {
            logits = crop3(tape, &logits, [0; 3], [xd, yd, zd])?;
        }
        let probs = softmax_channels(tape, &logits)?;
        Ok(Fwd { probs, params: vars })
    }
}
