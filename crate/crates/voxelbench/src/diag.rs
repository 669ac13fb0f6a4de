//! Gradient verification shared by the test suite and the `gradcheck`
//! command: a finite-difference battery over individual ops and losses,
//! and whole-network checks that compare tape gradients of a training
//! loss against numeric derivatives at the parameter level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::LossKind;
use crate::models::{collect_grads, Arch, Model};
use crate::tensor::ops::{
    batchnorm_train, channel_slice, concat_channels, conv1, conv3d, crop3, dropout, instancenorm,
    maxpool3, mul, pad3, relu, softmax_channels, sum, upsample3, BnState, Mode, Padding,
};
use crate::tensor::{
    directional_derivative_check, finite_difference_check, FdReport, Tape, Tensor, Var,
};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance a check must stay under.
pub const FD_TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values kept away from zero so ReLU and maxpool probes never sit
/// on a kink within the finite-difference step.
fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += if *v < 0.0 { -1e-2 } else { 1e-2 };
        }
    }
    t
}

fn random_binary(shape: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(fraction) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduce a map to a scalar through a fixed random weighting, so every
/// output coordinate contributes with a distinct coefficient.
fn probe(tape: Option<&Tape<f64>>, y: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    sum(tape, &mul(tape, y, &Var::constant(w.clone()))?)
}

/// Run the finite-difference battery over every differentiable op and loss,
/// one entry per (op, argument) pair. Input data varies with `seed`.
pub fn check_op_gradients(seed: u64) -> Result<Vec<(String, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, FdReport)> = Vec::new();

    // conv, valid padding, gradient wrt the input
    {
        let w = randn(&[4, 3, 3, 3, 3], &mut rng);
        let pw = randn(&[2, 4, 4, 3, 5], &mut rng);
        let x = randn(&[2, 3, 6, 5, 7], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| {
                let y = conv3d(tape, xv, &Var::constant(w.clone()), None, Padding::Valid)?;
                probe(tape, &y, &pw)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("conv3d.valid.input".into(), rep));
    }
    // conv, valid padding, gradient wrt the kernel
    {
        let x = randn(&[2, 3, 6, 5, 7], &mut rng);
        let pw = randn(&[2, 4, 4, 3, 5], &mut rng);
        let w = randn(&[4, 3, 3, 3, 3], &mut rng);
        let rep = finite_difference_check(
            |tape, wv| {
                let y = conv3d(tape, &Var::constant(x.clone()), wv, None, Padding::Valid)?;
                probe(tape, &y, &pw)
            },
            &w,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("conv3d.valid.kernel".into(), rep));
    }
    // conv, same padding, gradient wrt the input
    {
        let w = randn(&[3, 2, 3, 3, 3], &mut rng);
        let pw = randn(&[1, 3, 5, 4, 6], &mut rng);
        let x = randn(&[1, 2, 5, 4, 6], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| {
                let y = conv3d(tape, xv, &Var::constant(w.clone()), None, Padding::Same)?;
                probe(tape, &y, &pw)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("conv3d.same.input".into(), rep));
    }
    // conv bias
    {
        let x = randn(&[1, 2, 4, 4, 4], &mut rng);
        let w = randn(&[3, 2, 3, 3, 3], &mut rng);
        let pw = randn(&[1, 3, 2, 2, 2], &mut rng);
        let b = randn(&[3], &mut rng);
        let rep = finite_difference_check(
            |tape, bv| {
                let y = conv3d(
                    tape,
                    &Var::constant(x.clone()),
                    &Var::constant(w.clone()),
                    Some(bv),
                    Padding::Valid,
                )?;
                probe(tape, &y, &pw)
            },
            &b,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("conv3d.bias".into(), rep));
    }
    // pointwise conv, gradient wrt the kernel
    {
        let x = randn(&[2, 3, 4, 3, 5], &mut rng);
        let b = randn(&[4], &mut rng);
        let pw = randn(&[2, 4, 4, 3, 5], &mut rng);
        let w = randn(&[4, 3, 1, 1, 1], &mut rng);
        let rep = finite_difference_check(
            |tape, wv| {
                let y = conv1(tape, &Var::constant(x.clone()), wv, Some(&Var::constant(b.clone())))?;
                probe(tape, &y, &pw)
            },
            &w,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("conv1.kernel".into(), rep));
    }
    // batch normalization in training mode, wrt input and scale
    {
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let pw = randn(&[2, 3, 4, 4, 4], &mut rng);
        let x = randn(&[2, 3, 4, 4, 4], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| {
                let mut st = BnState::new(3);
                let y = batchnorm_train(
                    tape,
                    xv,
                    &Var::constant(gamma.clone()),
                    &Var::constant(beta.clone()),
                    &mut st,
                    1e-5,
                    0.9,
                )?;
                probe(tape, &y, &pw)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("batchnorm.input".into(), rep));

        let rep = finite_difference_check(
            |tape, gv| {
                let mut st = BnState::new(3);
                let y = batchnorm_train(
                    tape,
                    &Var::constant(x.clone()),
                    gv,
                    &Var::constant(beta.clone()),
                    &mut st,
                    1e-5,
                    0.9,
                )?;
                probe(tape, &y, &pw)
            },
            &gamma,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("batchnorm.scale".into(), rep));
    }
    // instance normalization wrt input
    {
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let pw = randn(&[2, 3, 4, 4, 4], &mut rng);
        let x = randn(&[2, 3, 4, 4, 4], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| {
                let y = instancenorm(
                    tape,
                    xv,
                    &Var::constant(gamma.clone()),
                    &Var::constant(beta.clone()),
                    1e-5,
                )?;
                probe(tape, &y, &pw)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("instancenorm.input".into(), rep));
    }
    // channel softmax
    {
        let pw = randn(&[2, 2, 3, 3, 3], &mut rng);
        let x = randn(&[2, 2, 3, 3, 3], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| probe(tape, &softmax_channels(tape, xv)?, &pw),
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("softmax.input".into(), rep));
    }
    // relu (inputs nudged off the kink)
    {
        let pw = randn(&[2, 3, 4, 4, 4], &mut rng);
        let x = randn_off_zero(&[2, 3, 4, 4, 4], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| probe(tape, &relu(tape, xv)?, &pw),
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("relu.input".into(), rep));
    }
    // max pooling
    {
        let pw = randn(&[1, 2, 2, 2, 2], &mut rng);
        let x = randn(&[1, 2, 6, 6, 6], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| probe(tape, &maxpool3(tape, xv)?, &pw),
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("maxpool.input".into(), rep));
    }
    // nearest-neighbour upsampling
    {
        let pw = randn(&[1, 2, 9, 9, 9], &mut rng);
        let x = randn(&[1, 2, 3, 3, 3], &mut rng);
        let rep = finite_difference_check(
            |tape, xv| probe(tape, &upsample3(tape, xv)?, &pw),
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("upsample.input".into(), rep));
    }
    // dropout with a fixed mask
    {
        let pw = randn(&[2, 2, 3, 3, 3], &mut rng);
        let x = randn(&[2, 2, 3, 3, 3], &mut rng);
        let mask_seed = rng.gen::<u64>();
        let rep = finite_difference_check(
            |tape, xv| {
                let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
                probe(tape, &dropout(tape, xv, 0.5, Mode::Train, &mut mrng)?, &pw)
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("dropout.input".into(), rep));
    }
    // structural ops chained: concat, pad, crop, channel slice
    {
        let b = randn(&[1, 2, 3, 3, 3], &mut rng);
        let pw = randn(&[1, 1, 3, 4, 3], &mut rng);
        let a = randn(&[1, 2, 3, 3, 3], &mut rng);
        let rep = finite_difference_check(
            |tape, av| {
                let cat = concat_channels(tape, &[av, &Var::constant(b.clone())])?;
                let padded = pad3(tape, &cat, [1, 0, 1], [0, 2, 0])?;
                let cropped = crop3(tape, &padded, [1, 1, 1], [3, 4, 3])?;
                probe(tape, &channel_slice(tape, &cropped, 2)?, &pw)
            },
            &a,
            FD_STEP,
            FD_TOL,
        )?;
        out.push(("concat.pad.crop.slice".into(), rep));
    }
    // every loss, driven through a softmax so probabilities stay interior
    {
        let kinds = [
            LossKind::CrossEntropy,
            LossKind::WeightedCrossEntropy { omega: 0.75 },
            LossKind::Focal { omega: 0.75, gamma: 2.0 },
            LossKind::SoftDice { doubled: false },
            LossKind::SoftDice { doubled: true },
            LossKind::Combined { alpha: 0.3 },
        ];
        let y = random_binary(&[1, 1, 3, 3, 3], 0.4, &mut rng);
        let x = randn(&[1, 2, 3, 3, 3], &mut rng);
        for kind in kinds {
            let rep = finite_difference_check(
                |tape, xv| {
                    let p = channel_slice(tape, &softmax_channels(tape, xv)?, 1)?;
                    kind.evaluate(tape, &p, &y)
                },
                &x,
                FD_STEP,
                FD_TOL,
            )?;
            out.push((format!("loss.{}", kind.label()), rep));
        }
    }

    Ok(out)
}

enum FixtureInput {
    Patches { hi: Tensor<f64>, lo: Tensor<f64> },
    Volume(Tensor<f64>),
}

/// A small 64-bit network plus a fixed input, target, and dropout mask seed,
/// set up so the training loss can be re-evaluated at arbitrary parameter
/// values. Evaluations clone the pristine model each time, so running
/// statistics never leak between probes.
pub struct ModelFixture {
    model: Model<f64>,
    input: FixtureInput,
    target: Tensor<f64>,
    drop_seed: u64,
}

/// Smallest geometry on which each architecture produces output: a 19-voxel
/// patch pair for the patch network (3-voxel prediction), an uneven volume
/// that exercises internal padding for the volumetric one.
pub fn model_fixture(arch: Arch, seed: u64) -> Result<ModelFixture> {
    let model = Model::build(arch, 1, 0.25, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
    let (input, target) = match arch {
        Arch::Deepmedic => {
            let hi = randn(&[1, 1, 19, 19, 19], &mut rng);
            let lo = randn(&[1, 1, 17, 17, 17], &mut rng);
            let target = random_binary(&[1, 1, 3, 3, 3], 0.4, &mut rng);
            (FixtureInput::Patches { hi, lo }, target)
        }
        Arch::Unet => {
            let x = randn(&[1, 1, 11, 27, 14], &mut rng);
            let target = random_binary(&[1, 1, 11, 27, 14], 0.3, &mut rng);
            (FixtureInput::Volume(x), target)
        }
    };
    Ok(ModelFixture {
        model,
        input,
        target,
        drop_seed: seed ^ 0xd1b5_4a32_d192_ed03,
    })
}

impl ModelFixture {
    fn run(&self, model: &mut Model<f64>, tape: Option<&Tape<f64>>) -> Result<(Var<f64>, Vec<Var<f64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.drop_seed);
        let fwd = match &self.input {
            FixtureInput::Patches { hi, lo } => {
                model.forward_patches(tape, hi, lo, Mode::Train, &mut rng)?
            }
            FixtureInput::Volume(x) => model.forward_volume(tape, x, Mode::Train, &mut rng)?,
        };
        let fg = channel_slice(tape, &fwd.probs, 1)?;
        let loss = LossKind::Combined { alpha: 0.5 }.evaluate(tape, &fg, &self.target)?;
        Ok((loss, fwd.params))
    }

    pub fn params(&self) -> &[Tensor<f64>] {
        self.model.store().tensors()
    }

    /// Training loss at the given parameter values, no tape.
    pub fn loss_at(&self, params: &[Tensor<f64>]) -> Result<f64> {
        let mut model = self.model.clone();
        model.store_mut().set_all(params)?;
        let (loss, _) = self.run(&mut model, None)?;
        loss.value().item()
    }

    /// One taped forward/backward at the stored parameters: loss value and
    /// the gradient of every parameter, in store order.
    pub fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut model = self.model.clone();
        let tape = Tape::new();
        let (loss, params) = self.run(&mut model, Some(&tape))?;
        let value = loss.value().item()?;
        let mut grads = tape.backward(&loss)?;
        Ok((value, collect_grads(&mut grads, &params)))
    }

    /// Compare the tape gradient against numeric directional derivatives
    /// along `n_dirs` random unit directions. Unit length keeps the total
    /// parameter displacement at exactly the step size, so curvature and
    /// activation kinks stay as far below the tolerance as they do in the
    /// per-coordinate check. Returns the worst relative error.
    pub fn check_directional(&self, n_dirs: usize) -> Result<f64> {
        let (_, grads) = self.loss_and_grads()?;
        let params = self.params().to_vec();
        let mut worst = 0.0f64;
        for k in 0..n_dirs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.drop_seed ^ (0x9e37_79b9 + k as u64));
            let mut dir: Vec<Tensor<f64>> = params
                .iter()
                .map(|p| randn(p.shape(), &mut rng))
                .collect();
            let norm = dir
                .iter()
                .flat_map(|d| d.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            for d in &mut dir {
                for v in d.data_mut() {
                    *v /= norm;
                }
            }
            let rel = directional_derivative_check(
                |shifted| self.loss_at(shifted),
                &params,
                &grads,
                &dir,
                FD_STEP,
            )?;
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    /// Per-coordinate central differences on a spread of coordinates from
    /// every `stride`-th parameter tensor. Returns (coordinates checked,
    /// worst relative error).
    pub fn check_coordinates(&self, stride: usize, per_param: usize) -> Result<(usize, f64)> {
        let (_, grads) = self.loss_and_grads()?;
        let base = self.params().to_vec();
        let mut checked = 0usize;
        let mut worst = 0.0f64;
        for pi in (0..base.len()).step_by(stride.max(1)) {
            let n = base[pi].numel();
            let mut probed = usize::MAX;
            for k in 0..per_param {
                let ci = (n * (2 * k + 1) / (2 * per_param)).min(n - 1);
                if ci == probed {
                    continue;
                }
                probed = ci;
                let mut hi = base.clone();
                hi[pi].data_mut()[ci] += FD_STEP;
                let mut lo = base.clone();
                lo[pi].data_mut()[ci] -= FD_STEP;
                let numeric = (self.loss_at(&hi)? - self.loss_at(&lo)?) / (2.0 * FD_STEP);
                let a = grads[pi].data()[ci];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        Ok((checked, worst))
    }
}
