//! Forward oracles and finite-difference gradient checks for every
//! differentiable op. Forward kernels are compared against independent
//! naive implementations written with plain nested loops; where the
//! accumulation order matches by construction the comparison is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxelbench::tensor::ops::{
    add, avgpool3, batchnorm_infer, batchnorm_train, channel_slice, concat_channels, conv1,
    conv3d, crop3, dropout, instancenorm, lincomb, maxpool3, mul, pad3, relu, softmax_channels,
    sum, upsample3, BnState, Mode, Padding,
};
use voxelbench::tensor::{finite_difference_check, s, Scalar, Tape, Tensor, Var};

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| s::<T>((rng.gen::<f64>() * 2.0 - 1.0) * scale))
}

/// Scalar probe: weighted sum with fixed random weights, so the upstream
/// gradient reaching the op under test is not a constant field.
fn probe<T: Scalar>(tape: Option<&Tape<T>>, y: &Var<T>, seed: u64) -> Var<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(rand_tensor::<T>(&mut rng, y.shape(), 1.0));
    let prod = mul(tape, y, &w).unwrap();
    sum(tape, &prod).unwrap()
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Plain seven-loop valid convolution, accumulating channel-major then
/// tap-major per output element (the same order the fast kernel uses).
fn naive_conv3d_valid<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let [bsz, cin, xd, yd, zd] = x.dims5().unwrap();
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let (ox, oy, oz) = (xd - k + 1, yd - k + 1, zd - k + 1);
    let mut out = Tensor::zeros(&[bsz, cout, ox, oy, oz]);
    let od = out.data_mut();
    let xd_ = x.data();
    let wd = w.data();
    for b in 0..bsz {
        for co in 0..cout {
            for i in 0..ox {
                for j in 0..oy {
                    for l in 0..oz {
                        let mut acc = match bias {
                            Some(bias) => bias.data()[co],
                            None => T::zero(),
                        };
                        for ci in 0..cin {
                            for kx in 0..k {
                                for ky in 0..k {
                                    for kz in 0..k {
                                        let xi = (((b * cin + ci) * xd + i + kx) * yd + j + ky)
                                            * zd
                                            + l
                                            + kz;
                                        let wi = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
                                        acc = xd_[xi].mul_add(wd[wi], acc);
                                    }
                                }
                            }
                        }
                        od[(((b * cout + co) * ox + i) * oy + j) * oz + l] = acc;
                    }
                }
            }
        }
    }
    out
}

fn naive_pad<T: Scalar>(x: &Tensor<T>, lo: [usize; 3], hi: [usize; 3]) -> Tensor<T> {
    let [b, c, xd, yd, zd] = x.dims5().unwrap();
    let (px, py, pz) = (xd + lo[0] + hi[0], yd + lo[1] + hi[1], zd + lo[2] + hi[2]);
    let mut out = Tensor::zeros(&[b, c, px, py, pz]);
    let od = out.data_mut();
    let sd = x.data();
    for bc in 0..b * c {
        for i in 0..xd {
            for j in 0..yd {
                for l in 0..zd {
                    od[((bc * px + i + lo[0]) * py + j + lo[1]) * pz + l + lo[2]] =
                        sd[((bc * xd + i) * yd + j) * zd + l];
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_valid_matches_naive_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (bsz, cin, cout, e, k) in [(2, 3, 4, 7, 3), (1, 1, 1, 5, 3), (2, 4, 2, 6, 1), (1, 2, 5, 9, 3)]
    {
        let x = rand_tensor::<f32>(&mut rng, &[bsz, cin, e, e, e], 1.0);
        let w = rand_tensor::<f32>(&mut rng, &[cout, cin, k, k, k], 0.5);
        let b = rand_tensor::<f32>(&mut rng, &[cout], 0.2);
        let got = conv3d(
            None,
            &Var::constant(x.clone()),
            &Var::constant(w.clone()),
            Some(&Var::constant(b.clone())),
            Padding::Valid,
        )
        .unwrap();
        let want = naive_conv3d_valid(&x, &w, Some(&b));
        assert_eq!(got.value().shape(), want.shape());
        assert_eq!(got.value().data(), want.data(), "bit-exact match expected");
    }
}

#[test]
fn conv3d_same_is_valid_conv_of_padded_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor::<f32>(&mut rng, &[2, 3, 6, 5, 7], 1.0);
    let w = rand_tensor::<f32>(&mut rng, &[4, 3, 3, 3, 3], 0.5);
    let got = conv3d(
        None,
        &Var::constant(x.clone()),
        &Var::constant(w.clone()),
        None,
        Padding::Same,
    )
    .unwrap();
    assert_eq!(got.value().shape(), &[2, 4, 6, 5, 7]);
    let want = naive_conv3d_valid(&naive_pad(&x, [1; 3], [1; 3]), &w, None);
    assert_eq!(got.value().data(), want.data());
}

#[test]
fn conv3d_same_even_kernel_pads_high_side() {
    // k=2: same padding must add the single pad voxel on the high side
    let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3, 3], |i| i as f32);
    let w = Tensor::<f32>::full(&[1, 1, 2, 2, 2], 1.0);
    let got = conv3d(
        None,
        &Var::constant(x.clone()),
        &Var::constant(w.clone()),
        None,
        Padding::Same,
    )
    .unwrap();
    assert_eq!(got.value().shape(), &[1, 1, 3, 3, 3]);
    let want = naive_conv3d_valid(&naive_pad(&x, [0; 3], [1; 3]), &w, None);
    assert_eq!(got.value().data(), want.data());
}

#[test]
fn conv3d_rejects_channel_mismatch_and_oversized_kernel() {
    let x = Tensor::<f32>::zeros(&[1, 3, 5, 5, 5]);
    let w = Tensor::<f32>::zeros(&[2, 4, 3, 3, 3]);
    let err = conv3d(
        None,
        &Var::constant(x.clone()),
        &Var::constant(w),
        None,
        Padding::Valid,
    )
    .unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");

    let w = Tensor::<f32>::zeros(&[2, 3, 7, 7, 7]);
    let err = conv3d(None, &Var::constant(x), &Var::constant(w), None, Padding::Valid).unwrap_err();
    assert!(err.to_string().contains("exceeds"), "{err}");
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor::<f64>(&mut rng, &[2, 2, 5, 5, 5], 1.0);
        let w = rand_tensor::<f64>(&mut rng, &[3, 2, 3, 3, 3], 0.5);
        let b = rand_tensor::<f64>(&mut rng, &[3], 0.2);
        let padding = if seed % 2 == 0 { Padding::Valid } else { Padding::Same };

        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let rep = finite_difference_check(
            move |tape, xv| {
                let y = conv3d(
                    tape,
                    xv,
                    &Var::constant(wc.clone()),
                    Some(&Var::constant(bc.clone())),
                    padding,
                )?;
                Ok(probe(tape, &y, seed))
            },
            &xc,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.passed(), "d/dx seed {seed}: {rep:?}");

        let (xc, bc) = (x.clone(), b.clone());
        let rep = finite_difference_check(
            move |tape, wv| {
                let y = conv3d(
                    tape,
                    &Var::constant(xc.clone()),
                    wv,
                    Some(&Var::constant(bc.clone())),
                    padding,
                )?;
                Ok(probe(tape, &y, seed))
            },
            &w,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.passed(), "d/dw seed {seed}: {rep:?}");

        let (xc, wc) = (x.clone(), w.clone());
        let rep = finite_difference_check(
            move |tape, bv| {
                let y = conv3d(tape, &Var::constant(xc.clone()), &Var::constant(wc.clone()), Some(bv), padding)?;
                Ok(probe(tape, &y, seed))
            },
            &b,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.passed(), "d/db seed {seed}: {rep:?}");
    }
}

#[test]
fn conv1_matches_naive_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor::<f32>(&mut rng, &[2, 5, 4, 3, 4], 1.0);
    let w = rand_tensor::<f32>(&mut rng, &[3, 5, 1, 1, 1], 0.5);
    let b = rand_tensor::<f32>(&mut rng, &[3], 0.2);
    let got = conv1(
        None,
        &Var::constant(x.clone()),
        &Var::constant(w.clone()),
        Some(&Var::constant(b.clone())),
    )
    .unwrap();
    let want = naive_conv3d_valid(&x, &w, Some(&b));
    // same channel accumulation order: exact
    assert_eq!(got.value().data(), want.data());

    let xd = rand_tensor::<f64>(&mut rng, &[1, 6, 3, 3, 3], 1.0);
    let wd = rand_tensor::<f64>(&mut rng, &[2, 6, 1, 1, 1], 0.5);
    let bd = rand_tensor::<f64>(&mut rng, &[2], 0.2);
    for which in 0..3 {
        let (xc, wc, bc) = (xd.clone(), wd.clone(), bd.clone());
        let target = [xd.clone(), wd.clone(), bd.clone()][which].clone();
        let rep = finite_difference_check(
            move |tape, v| {
                let xv = if which == 0 { v.clone() } else { Var::constant(xc.clone()) };
                let wv = if which == 1 { v.clone() } else { Var::constant(wc.clone()) };
                let bv = if which == 2 { v.clone() } else { Var::constant(bc.clone()) };
                let y = conv1(tape, &xv, &wv, Some(&bv))?;
                Ok(probe(tape, &y, 77))
            },
            &target,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.passed(), "conv1 input {which}: {rep:?}");
    }
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

#[test]
fn maxpool3_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor::<f32>(&mut rng, &[2, 3, 6, 9, 3], 1.0);
    let got = maxpool3(None, &Var::constant(x.clone())).unwrap();
    assert_eq!(got.value().shape(), &[2, 3, 2, 3, 1]);
    let [b, c, xd, yd, zd] = x.dims5().unwrap();
    let sd = x.data();
    for bc in 0..b * c {
        for i in 0..xd / 3 {
            for j in 0..yd / 3 {
                for l in 0..zd / 3 {
                    let mut best = f32::NEG_INFINITY;
                    for di in 0..3 {
                        for dj in 0..3 {
                            for dl in 0..3 {
                                let v = sd
                                    [((bc * xd + 3 * i + di) * yd + 3 * j + dj) * zd + 3 * l + dl];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                    let o = got.value().data()
                        [((bc * (xd / 3) + i) * (yd / 3) + j) * (zd / 3) + l];
                    assert_eq!(o, best);
                }
            }
        }
    }

    let bad = Tensor::<f32>::zeros(&[1, 1, 4, 3, 3]);
    let err = maxpool3(None, &Var::constant(bad)).unwrap_err();
    assert!(err.to_string().contains("divisible"), "{err}");
}

#[test]
fn maxpool3_tie_routes_gradient_to_first_in_scan_order() {
    // all window elements equal: the whole upstream gradient must land on
    // the first element of the window
    let x = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 2.5);
    let tape = Tape::new();
    let xv = tape.watch(x);
    let y = maxpool3(Some(&tape), &xv).unwrap();
    let loss = sum(Some(&tape), &y).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let dx = grads.of(&xv).unwrap();
    assert_eq!(dx.data()[0], 1.0);
    assert_eq!(dx.data()[1..], vec![0.0; 26][..]);
}

#[test]
fn maxpool3_gradient_matches_finite_differences() {
    // distinct values keep argmax stable under the FD perturbation
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut vals: Vec<f64> = (0..54).map(|i| i as f64 * 0.37 - 9.0).collect();
    for i in (1..54).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(&[1, 2, 3, 3, 3], vals).unwrap();
    let rep = finite_difference_check(
        |tape, xv| {
            let y = maxpool3(tape, xv)?;
            Ok(probe(tape, &y, 5))
        },
        &x,
        1e-6,
        1e-7,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn upsample3_replicates_blocks_and_inverts_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor::<f32>(&mut rng, &[2, 2, 2, 3, 2], 1.0);
    let up = upsample3(None, &Var::constant(x.clone())).unwrap();
    assert_eq!(up.value().shape(), &[2, 2, 6, 9, 6]);
    let [b, c, xd, yd, zd] = x.dims5().unwrap();
    for bc in 0..b * c {
        for i in 0..3 * xd {
            for j in 0..3 * yd {
                for l in 0..3 * zd {
                    let o = up.value().data()[((bc * 3 * xd + i) * 3 * yd + j) * 3 * zd + l];
                    let s = x.data()[((bc * xd + i / 3) * yd + j / 3) * zd + l / 3];
                    assert_eq!(o, s);
                }
            }
        }
    }
    // max over a constant 3x3x3 block is the block value
    let pooled = maxpool3(None, &up).unwrap();
    assert_eq!(pooled.value().data(), x.data());
}

#[test]
fn upsample3_gradient_sums_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 2, 2, 2], 1.0);
    let rep = finite_difference_check(
        |tape, xv| {
            let y = upsample3(tape, xv)?;
            Ok(probe(tape, &y, 9))
        },
        &x,
        1e-6,
        1e-8,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn avgpool3_matches_block_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 3, 6, 3], 1.0);
    let got = avgpool3(&x).unwrap();
    assert_eq!(got.shape(), &[1, 2, 1, 2, 1]);
    let [_, _, xd, yd, zd] = x.dims5().unwrap();
    for bc in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    for dl in 0..3 {
                        acc += x.data()[((bc * xd + di) * yd + 3 * j + dj) * zd + dl];
                    }
                }
            }
            let want = acc / 27.0;
            let o = got.data()[bc * 2 + j];
            assert!((o - want).abs() < 1e-12, "{o} vs {want}");
        }
    }
    assert!(avgpool3(&Tensor::<f32>::zeros(&[1, 1, 3, 5, 3])).is_err());
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

#[test]
fn batchnorm_train_normalizes_and_tracks_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = rand_tensor::<f64>(&mut rng, &[3, 2, 4, 4, 4], 2.0);
    let gamma = Tensor::full(&[2], 1.5);
    let beta = Tensor::full(&[2], -0.25);
    let mut state = BnState::<f64>::new(2);
    let eps = 1e-5;
    let y = batchnorm_train(
        None,
        &Var::constant(x.clone()),
        &Var::constant(gamma),
        &Var::constant(beta),
        &mut state,
        eps,
        0.9,
    )
    .unwrap();

    // per-channel output statistics: mean beta, std gamma (up to eps)
    let [b, c, xd, yd, zd] = x.dims5().unwrap();
    let v = xd * yd * zd;
    for ch in 0..c {
        let mut vals = Vec::new();
        for bi in 0..b {
            vals.extend_from_slice(
                &y.value().data()[(bi * c + ch) * v..(bi * c + ch + 1) * v],
            );
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / vals.len() as f64;
        assert!((m - -0.25).abs() < 1e-9, "channel {ch} mean {m}");
        assert!((var.sqrt() - 1.5).abs() < 1e-3, "channel {ch} std {}", var.sqrt());

        // running stats carry one decayed update from the (0,1) start
        let mut raw = Vec::new();
        for bi in 0..b {
            raw.extend_from_slice(&x.data()[(bi * c + ch) * v..(bi * c + ch + 1) * v]);
        }
        let bm = raw.iter().sum::<f64>() / raw.len() as f64;
        let bv = raw.iter().map(|&t| (t - bm) * (t - bm)).sum::<f64>() / raw.len() as f64;
        assert!((state.running_mean[ch] - 0.1 * bm).abs() < 1e-12);
        assert!((state.running_var[ch] - (0.9 + 0.1 * bv)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_infer_is_running_stat_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let x = rand_tensor::<f64>(&mut rng, &[2, 2, 3, 3, 3], 1.0);
    let gamma = rand_tensor::<f64>(&mut rng, &[2], 1.0);
    let beta = rand_tensor::<f64>(&mut rng, &[2], 1.0);
    let state = BnState {
        running_mean: vec![0.3, -0.6],
        running_var: vec![1.9, 0.7],
    };
    let eps = 1e-5;
    let y = batchnorm_infer(
        None,
        &Var::constant(x.clone()),
        &Var::constant(gamma.clone()),
        &Var::constant(beta.clone()),
        &state,
        eps,
    )
    .unwrap();
    let [b, c, xd, yd, zd] = x.dims5().unwrap();
    let v = xd * yd * zd;
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..v {
                let xin = x.data()[(bi * c + ch) * v + i];
                let want = gamma.data()[ch] * (xin - state.running_mean[ch])
                    / (state.running_var[ch] + eps).sqrt()
                    + beta.data()[ch];
                let got = y.value().data()[(bi * c + ch) * v + i];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(530 + seed);
        let x = rand_tensor::<f64>(&mut rng, &[2, 3, 3, 3, 3], 1.5);
        let gamma = rand_tensor::<f64>(&mut rng, &[3], 1.0);
        let beta = rand_tensor::<f64>(&mut rng, &[3], 1.0);
        for which in 0..3 {
            let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
            let target = [x.clone(), gamma.clone(), beta.clone()][which].clone();
            let rep = finite_difference_check(
                move |tape, v| {
                    let xv = if which == 0 { v.clone() } else { Var::constant(xc.clone()) };
                    let gv = if which == 1 { v.clone() } else { Var::constant(gc.clone()) };
                    let bv = if which == 2 { v.clone() } else { Var::constant(bc.clone()) };
                    let mut st = BnState::new(3);
                    let y = batchnorm_train(tape, &xv, &gv, &bv, &mut st, 1e-5, 0.9)?;
                    Ok(probe(tape, &y, seed))
                },
                &target,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(rep.passed(), "train input {which} seed {seed}: {rep:?}");

            let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
            let rep = finite_difference_check(
                move |tape, v| {
                    let xv = if which == 0 { v.clone() } else { Var::constant(xc.clone()) };
                    let gv = if which == 1 { v.clone() } else { Var::constant(gc.clone()) };
                    let bv = if which == 2 { v.clone() } else { Var::constant(bc.clone()) };
                    let st = BnState {
                        running_mean: vec![0.2, -0.1, 0.05],
                        running_var: vec![1.3, 0.8, 1.0],
                    };
                    let y = batchnorm_infer(tape, &xv, &gv, &bv, &st, 1e-5)?;
                    Ok(probe(tape, &y, seed))
                },
                &target,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(rep.passed(), "infer input {which} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn instancenorm_normalizes_per_instance_and_checks_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let x = rand_tensor::<f64>(&mut rng, &[2, 2, 3, 4, 3], 2.0);
    let gamma = Tensor::full(&[2], 1.0);
    let beta = Tensor::full(&[2], 0.0);
    let y = instancenorm(
        None,
        &Var::constant(x.clone()),
        &Var::constant(gamma.clone()),
        &Var::constant(beta.clone()),
        1e-5,
    )
    .unwrap();
    let v = 3 * 4 * 3;
    for g in 0..4 {
        let sl = &y.value().data()[g * v..(g + 1) * v];
        let m = sl.iter().sum::<f64>() / v as f64;
        let var = sl.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / v as f64;
        assert!(m.abs() < 1e-10, "group {g} mean {m}");
        assert!((var - 1.0).abs() < 1e-3, "group {g} var {var}");
    }

    for which in 0..3 {
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        let target = [x.clone(), gamma.clone(), beta.clone()][which].clone();
        let rep = finite_difference_check(
            move |tape, vv| {
                let xv = if which == 0 { vv.clone() } else { Var::constant(xc.clone()) };
                let gv = if which == 1 { vv.clone() } else { Var::constant(gc.clone()) };
                let bv = if which == 2 { vv.clone() } else { Var::constant(bc.clone()) };
                let y = instancenorm(tape, &xv, &gv, &bv, 1e-5)?;
                Ok(probe(tape, &y, 3))
            },
            &target,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "input {which}: {rep:?}");
    }
}

// ---------------------------------------------------------------------------
// pointwise and structural
// ---------------------------------------------------------------------------

#[test]
fn relu_and_softmax_forward_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = rand_tensor::<f64>(&mut rng, &[2, 3, 3, 3, 3], 2.0);
    let y = relu(None, &Var::constant(x.clone())).unwrap();
    for (a, b) in x.iter().zip(y.value().iter()) {
        assert_eq!(*b, a.max(0.0));
    }
    let rep = finite_difference_check(
        |tape, xv| {
            let y = relu(tape, xv)?;
            Ok(probe(tape, &y, 1))
        },
        &x,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "relu: {rep:?}");

    let p = softmax_channels(None, &Var::constant(x.clone())).unwrap();
    let v = 27;
    for bi in 0..2 {
        for i in 0..v {
            let mut tot = 0.0;
            for ch in 0..3 {
                let pv = p.value().data()[(bi * 3 + ch) * v + i];
                assert!(pv > 0.0 && pv < 1.0);
                tot += pv;
            }
            assert!((tot - 1.0).abs() < 1e-12, "voxel sum {tot}");
        }
    }
    let rep = finite_difference_check(
        |tape, xv| {
            let y = softmax_channels(tape, xv)?;
            Ok(probe(tape, &y, 2))
        },
        &x,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "softmax: {rep:?}");
}

#[test]
fn concat_and_slice_roundtrip_with_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let a = rand_tensor::<f64>(&mut rng, &[2, 2, 3, 3, 3], 1.0);
    let b = rand_tensor::<f64>(&mut rng, &[2, 3, 3, 3, 3], 1.0);
    let cat = concat_channels(None, &[&Var::constant(a.clone()), &Var::constant(b.clone())])
        .unwrap();
    assert_eq!(cat.value().shape(), &[2, 5, 3, 3, 3]);
    for ch in 0..5 {
        let sl = channel_slice(None, &cat, ch).unwrap();
        let src = if ch < 2 {
            channel_slice(None, &Var::constant(a.clone()), ch).unwrap()
        } else {
            channel_slice(None, &Var::constant(b.clone()), ch - 2).unwrap()
        };
        assert_eq!(sl.value().data(), src.value().data());
    }

    let rep = finite_difference_check(
        |tape, av| {
            let b = Var::constant(Tensor::<f64>::full(&[2, 3, 3, 3, 3], 0.5));
            let cat = concat_channels(tape, &[av, &b])?;
            let sl = channel_slice(tape, &cat, 1)?;
            Ok(probe(tape, &sl, 4))
        },
        &a,
        1e-6,
        1e-8,
    )
    .unwrap();
    assert!(rep.passed(), "concat/slice: {rep:?}");

    let mismatched = Var::constant(Tensor::<f64>::zeros(&[2, 1, 4, 3, 3]));
    let err = concat_channels(None, &[&Var::constant(a), &mismatched]).unwrap_err();
    assert!(err.to_string().contains("axis x"), "{err}");
}

#[test]
fn pad_crop_inverse_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 3, 4, 3], 1.0);
    let padded = pad3(None, &Var::constant(x.clone()), [1, 0, 2], [2, 1, 0]).unwrap();
    assert_eq!(padded.value().shape(), &[1, 2, 6, 5, 5]);
    let back = crop3(None, &padded, [1, 0, 2], [3, 4, 3]).unwrap();
    assert_eq!(back.value().data(), x.data());

    for op in 0..2 {
        let rep = finite_difference_check(
            move |tape, xv| {
                let y = if op == 0 {
                    pad3(tape, xv, [1, 2, 0], [0, 1, 2])?
                } else {
                    crop3(tape, xv, [0, 1, 0], [2, 2, 3])?
                };
                Ok(probe(tape, &y, 6))
            },
            &x,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed(), "op {op}: {rep:?}");
    }
}

#[test]
fn dropout_train_scales_survivors_and_infer_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let x = rand_tensor::<f32>(&mut rng, &[1, 4, 6, 6, 6], 1.0);
    let rate = 0.5;

    let mut d_rng = ChaCha8Rng::seed_from_u64(7);
    let y = dropout(None, &Var::constant(x.clone()), rate, Mode::Train, &mut d_rng).unwrap();
    let mut zeros = 0usize;
    for (a, b) in x.iter().zip(y.value().iter()) {
        if *b == 0.0 {
            zeros += 1;
        } else {
            assert!((b / a - 2.0).abs() < 1e-6, "survivor must be scaled by 1/(1-rate)");
        }
    }
    let frac = zeros as f64 / x.numel() as f64;
    assert!((frac - rate).abs() < 0.05, "zeroed fraction {frac}");

    // same seed, same mask
    let mut d_rng = ChaCha8Rng::seed_from_u64(7);
    let y2 = dropout(None, &Var::constant(x.clone()), rate, Mode::Train, &mut d_rng).unwrap();
    assert_eq!(y.value().data(), y2.value().data());

    let mut d_rng = ChaCha8Rng::seed_from_u64(8);
    let yi = dropout(None, &Var::constant(x.clone()), rate, Mode::Infer, &mut d_rng).unwrap();
    assert_eq!(yi.value().data(), x.data());

    let mut d_rng = ChaCha8Rng::seed_from_u64(9);
    assert!(dropout(None, &Var::constant(x), 1.0, Mode::Train, &mut d_rng).is_err());
}

#[test]
fn dropout_gradient_is_mask_scaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 3, 3, 3], 1.0);
    let rep = finite_difference_check(
        |tape, xv| {
            // fresh rng with a fixed seed per evaluation: identical mask
            let mut d_rng = ChaCha8Rng::seed_from_u64(1234);
            let y = dropout(tape, xv, 0.3, Mode::Train, &mut d_rng)?;
            Ok(probe(tape, &y, 8))
        },
        &x,
        1e-6,
        1e-8,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn arithmetic_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let a = rand_tensor::<f64>(&mut rng, &[2, 1, 2, 2, 2], 1.0);
    let b = rand_tensor::<f64>(&mut rng, &[2, 1, 2, 2, 2], 1.0);

    let bc = b.clone();
    let rep = finite_difference_check(
        move |tape, av| {
            let s = add(tape, av, &Var::constant(bc.clone()))?;
            let m = mul(tape, &s, av)?;
            let l = lincomb(tape, &m, 0.7, &s, 0.3)?;
            Ok(probe(tape, &l, 10))
        },
        &a,
        1e-6,
        1e-7,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");

    // gradient flows through both uses of a shared subexpression
    let tape = Tape::new();
    let av = tape.watch(a.clone());
    let sq = mul(Some(&tape), &av, &av).unwrap();
    let loss = sum(Some(&tape), &sq).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let dx = grads.of(&av).unwrap();
    for (g, v) in dx.iter().zip(a.iter()) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar_loss_and_tracked_root() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
    let tape = Tape::new();
    let xv = tape.watch(x.clone());
    let y = relu(Some(&tape), &xv).unwrap();
    assert!(tape.backward(&y).is_err(), "non-scalar loss must be rejected");

    let tape = Tape::new();
    let c = Var::constant(Tensor::<f64>::scalar(1.0));
    assert!(tape.backward(&c).is_err(), "constant loss must be rejected");
}

#[test]
fn untracked_inputs_record_nothing() {
    let tape = Tape::new();
    let x = Var::constant(Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0));
    let w = Var::constant(Tensor::<f64>::full(&[1, 1, 3, 3, 3], 0.5));
    let _ = conv3d(Some(&tape), &x, &w, None, Padding::Valid).unwrap();
    let _ = relu(Some(&tape), &x).unwrap();
    assert!(tape.is_empty(), "constant-only graph must not grow the tape");
}
