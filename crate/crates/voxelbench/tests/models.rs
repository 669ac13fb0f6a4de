//! Construction, counting, geometry, initialization-statistics, and
//! checkpoint round-trip tests for both architectures.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelbench::models::checkpoint::{load_checkpoint, save_checkpoint};
use voxelbench::models::{he_init, scale_width, Arch, DeepMedicNet, Model};
use voxelbench::optim::{Optimizer, OptimKind};
use voxelbench::tensor::ops::Mode;
use voxelbench::tensor::Tensor;

#[test]
fn width_scaling_rounds_to_nearest_with_floor_one() {
    assert_eq!(scale_width(30, 1.0), 30);
    assert_eq!(scale_width(30, 0.25), 8); // 7.5 rounds up
    assert_eq!(scale_width(50, 0.25), 13); // 12.5 rounds up
    assert_eq!(scale_width(40, 0.25), 10);
    assert_eq!(scale_width(30, 0.5), 15);
    assert_eq!(scale_width(20, 0.01), 1);
    assert_eq!(scale_width(150, 1.5), 225);
}

#[test]
fn deepmedic_reference_parameter_count() {
    let model = Model::<f32>::build(Arch::Deepmedic, 4, 1.0, 0).unwrap();
    // reconstruction totals 661,762; the published figure is 663,491
    let count = model.count_parameters();
    assert_eq!(count, 661_762);
    let published = 663_491.0;
    let rel = (count as f64 - published).abs() / published;
    assert!(rel < 0.02, "relative gap {rel:.4} exceeds 2%");
}

#[test]
fn unet_reference_parameter_count() {
    let model = Model::<f32>::build(Arch::Unet, 4, 1.0, 0).unwrap();
    let count = model.count_parameters();
    assert_eq!(count, 3_884_282);
    let published = 3_878_841.0;
    let rel = (count as f64 - published).abs() / published;
    assert!(rel < 0.05, "relative gap {rel:.4} exceeds 5%");
}

#[test]
fn first_conv_block_counts_as_expected() {
    // conv [30,4,3,3,3] without bias plus its norm pair: 3240 + 60
    let model = Model::<f32>::build(Arch::Deepmedic, 4, 1.0, 0).unwrap();
    let params = model.list_parameters();
    assert_eq!(params[0].0, "hi.conv0.w");
    assert_eq!(params[0].1, vec![30, 4, 3, 3, 3]);
    let first_block: usize = params[..3].iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(first_block, 3300);
}

#[test]
fn half_width_unet_is_under_half_the_reference_conv_weights() {
    let reference = Model::<f32>::build(Arch::Unet, 4, 1.0, 0).unwrap();
    let conv3_weights: usize = reference
        .list_parameters()
        .iter()
        .filter(|(name, shape)| name.ends_with(".w") && shape.len() == 5 && shape[2] == 3)
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let half = Model::<f32>::build(Arch::Unet, 4, 0.5, 0).unwrap();
    assert!(
        half.count_parameters() < conv3_weights / 2,
        "{} vs half of {}",
        half.count_parameters(),
        conv3_weights
    );
}

#[test]
fn counts_are_deterministic_and_monotone_in_width() {
    for arch in [Arch::Deepmedic, Arch::Unet] {
        let mut prev = 0usize;
        for width in [0.25, 0.5, 1.0, 1.5] {
            let a = Model::<f32>::build(arch, 4, width, 1).unwrap().count_parameters();
            let b = Model::<f32>::build(arch, 4, width, 99).unwrap().count_parameters();
            assert_eq!(a, b, "count must not depend on the seed");
            assert!(a > prev, "count must grow with width");
            prev = a;
        }
        // fewer input channels, fewer parameters
        let narrow = Model::<f32>::build(arch, 1, 1.0, 0).unwrap().count_parameters();
        let wide = Model::<f32>::build(arch, 4, 1.0, 0).unwrap().count_parameters();
        assert!(narrow < wide);
    }
}

#[test]
fn parameter_names_are_unique() {
    for arch in [Arch::Deepmedic, Arch::Unet] {
        let model = Model::<f32>::build(arch, 4, 1.0, 0).unwrap();
        let names: Vec<String> = model.list_parameters().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}

#[test]
fn build_rejects_bad_inputs() {
    assert!(Model::<f32>::build(Arch::Deepmedic, 0, 1.0, 0).is_err());
    assert!(Model::<f32>::build(Arch::Deepmedic, 5, 1.0, 0).is_err());
    assert!(Model::<f32>::build(Arch::Unet, 4, 0.0, 0).is_err());
    assert!(Model::<f32>::build(Arch::Unet, 4, -1.0, 0).is_err());
    assert!("deepmedic".parse::<Arch>().is_ok());
    assert!("unet".parse::<Arch>().is_ok());
    assert!("resnet".parse::<Arch>().is_err());
    assert_eq!(Arch::Deepmedic.to_string(), "deepmedic");
    assert_eq!(Arch::Unet.to_string(), "unet");
}

#[test]
fn he_init_statistics_and_determinism() {
    // sigma = sqrt(2 / (Cin * k^3))
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = he_init::<f64>(&[100, 40, 3, 3, 3], &mut rng).unwrap();
    let n = t.numel() as f64;
    let mean: f64 = t.iter().sum::<f64>() / n;
    let var: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let want = (2.0 / 1080.0f64).sqrt();
    assert!((var.sqrt() - want).abs() / want < 0.01, "std {} vs {want}", var.sqrt());
    assert!(mean.abs() < 0.001);

    let mut r1 = ChaCha8Rng::seed_from_u64(7);
    let mut r2 = ChaCha8Rng::seed_from_u64(7);
    let a = he_init::<f32>(&[4, 4, 3, 3, 3], &mut r1).unwrap();
    let b = he_init::<f32>(&[4, 4, 3, 3, 3], &mut r2).unwrap();
    assert_eq!(a.data(), b.data());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert!(he_init::<f32>(&[4, 0, 3, 3, 3], &mut rng).is_err());
    assert!(he_init::<f32>(&[4, 4, 3, 3], &mut rng).is_err());
}

#[test]
fn same_seed_same_model_different_seed_different() {
    let a = Model::<f32>::build(Arch::Unet, 2, 0.25, 42).unwrap();
    let b = Model::<f32>::build(Arch::Unet, 2, 0.25, 42).unwrap();
    let c = Model::<f32>::build(Arch::Unet, 2, 0.25, 43).unwrap();
    for ((_, ta), (_, tb)) in a.store().iter().zip(b.store().iter()) {
        assert_eq!(ta.data(), tb.data());
    }
    let differs = a
        .store()
        .iter()
        .zip(c.store().iter())
        .any(|((_, ta), (_, tc))| ta.data() != tc.data());
    assert!(differs);
}

#[test]
fn deepmedic_patch_geometry_and_probability_normalization() {
    let mut model = Model::<f32>::build(Arch::Deepmedic, 2, 0.25, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hi = Tensor::from_fn(&[2, 2, 25, 25, 25], |i| ((i % 17) as f32 - 8.0) * 0.1);
    let lo = Tensor::from_fn(&[2, 2, 19, 19, 19], |i| ((i % 13) as f32 - 6.0) * 0.1);
    let fwd = model.forward_patches(None, &hi, &lo, Mode::Infer, &mut rng).unwrap();
    assert_eq!(fwd.probs.shape(), &[2, 2, 9, 9, 9]);
    let pd = fwd.probs.value().data();
    let v = 9 * 9 * 9;
    for b in 0..2 {
        for i in 0..v {
            let tot = pd[(b * 2) * v + i] + pd[(b * 2 + 1) * v + i];
            assert!((tot - 1.0).abs() < 1e-6, "voxel sum {tot}");
        }
    }
}

#[test]
fn deepmedic_rejects_misaligned_context() {
    assert_eq!(DeepMedicNet::<f32>::lo_extent(25).unwrap(), 19);
    assert_eq!(DeepMedicNet::<f32>::lo_extent(19).unwrap(), 17);
    assert_eq!(DeepMedicNet::<f32>::lo_extent(55).unwrap(), 29);
    let mut model = Model::<f32>::build(Arch::Deepmedic, 1, 0.25, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hi = Tensor::<f32>::zeros(&[1, 1, 25, 25, 25]);
    let bad_lo = Tensor::<f32>::zeros(&[1, 1, 18, 18, 18]);
    let err = model.forward_patches(None, &hi, &bad_lo, Mode::Infer, &mut rng).unwrap_err();
    assert!(err.to_string().contains("context"), "{err}");
    // output extent not divisible by three
    let hi = Tensor::<f32>::zeros(&[1, 1, 24, 24, 24]);
    let lo = Tensor::<f32>::zeros(&[1, 1, 19, 19, 19]);
    assert!(model.forward_patches(None, &hi, &lo, Mode::Infer, &mut rng).is_err());
    // too small to survive eight valid convs
    assert!(DeepMedicNet::<f32>::lo_extent(16).is_err());
    // channel mismatch
    let hi = Tensor::<f32>::zeros(&[1, 2, 25, 25, 25]);
    let lo = Tensor::<f32>::zeros(&[1, 2, 19, 19, 19]);
    assert!(model.forward_patches(None, &hi, &lo, Mode::Infer, &mut rng).is_err());
}

#[test]
fn deepmedic_impulse_affects_exactly_seventeen_cubed() {
    // all taps equal and summing to one per conv: the relu stack is
    // linear on positive input with unit gain, so the baseline stays
    // near 1 and the response support is exactly the receptive field
    let mut model = DeepMedicNet::<f64>::build(1, 0.25, 11).unwrap();
    for t in model.store.tensors_mut() {
        if t.shape().len() == 5 {
            let cin = t.shape()[1];
            let tap = 1.0 / (cin as f64 * 27.0);
            let d = t.data_mut();
            for v in d {
                *v = tap;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = Tensor::<f64>::full(&[1, 1, 41, 41, 41], 1.0);
    let mut poked = base.clone();
    let center = (20 * 41 + 20) * 41 + 20;
    poked.data_mut()[center] += 1e8;

    let f0 = model.hi_features(None, &base, Mode::Infer, &mut rng).unwrap();
    let f1 = model.hi_features(None, &poked, Mode::Infer, &mut rng).unwrap();
    assert_eq!(f0.shape(), f1.shape());
    let [_, ch, e, _, _] = f0.value().dims5().unwrap();
    assert_eq!(e, 25);

    let d0 = f0.value().data();
    let d1 = f1.value().data();
    let v = e * e * e;
    for c in 0..ch {
        for i in 0..e {
            for j in 0..e {
                for l in 0..e {
                    let at = c * v + (i * e + j) * e + l;
                    let inside = (4..=20).contains(&i) && (4..=20).contains(&j) && (4..=20).contains(&l);
                    let delta = (d1[at] - d0[at]).abs();
                    if inside {
                        assert!(delta > 0.0, "channel {c} voxel ({i},{j},{l}) unmoved");
                    } else {
                        assert_eq!(delta, 0.0, "channel {c} voxel ({i},{j},{l}) moved");
                    }
                }
            }
        }
    }
}

#[test]
fn unet_preserves_arbitrary_extents() {
    let mut model = Model::<f32>::build(Arch::Unet, 2, 0.25, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in [[1usize, 2, 27, 27, 27], [1, 2, 29, 41, 33], [2, 2, 9, 14, 27]] {
        let x = Tensor::from_fn(&shape, |i| ((i % 23) as f32 - 11.0) * 0.05);
        let fwd = model.forward_volume(None, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(fwd.probs.shape(), &[shape[0], 2, shape[2], shape[3], shape[4]]);
        let pd = fwd.probs.value().data();
        let v = shape[2] * shape[3] * shape[4];
        for b in 0..shape[0] {
            for i in 0..v {
                let tot = pd[(b * 2) * v + i] + pd[(b * 2 + 1) * v + i];
                assert!((tot - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn unet_all_zero_input_still_normalizes() {
    let mut model = Model::<f32>::build(Arch::Unet, 4, 0.25, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::zeros(&[1, 4, 9, 9, 9]);
    let fwd = model.forward_volume(None, &x, Mode::Infer, &mut rng).unwrap();
    let pd = fwd.probs.value().data();
    for i in 0..729 {
        assert!((pd[i] + pd[729 + i] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn wrong_forward_entry_point_is_rejected() {
    let mut dm = Model::<f32>::build(Arch::Deepmedic, 1, 0.25, 0).unwrap();
    let mut un = Model::<f32>::build(Arch::Unet, 1, 0.25, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::zeros(&[1, 1, 27, 27, 27]);
    assert!(dm.forward_volume(None, &x, Mode::Infer, &mut rng).is_err());
    let hi = Tensor::<f32>::zeros(&[1, 1, 25, 25, 25]);
    let lo = Tensor::<f32>::zeros(&[1, 1, 19, 19, 19]);
    assert!(un.forward_patches(None, &hi, &lo, Mode::Infer, &mut rng).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");

    let mut model = Model::<f32>::build(Arch::Deepmedic, 2, 0.25, 21).unwrap();
    // drive the running norm buffers off their initialization
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hi = Tensor::from_fn(&[1, 2, 19, 19, 19], |i| (i % 7) as f32 * 0.3 - 1.0);
    let lo = Tensor::from_fn(&[1, 2, 17, 17, 17], |i| (i % 5) as f32 * 0.2 - 0.5);
    model.forward_patches(None, &hi, &lo, Mode::Train, &mut rng).unwrap();

    let mut metrics = BTreeMap::new();
    metrics.insert("val_dsc".to_string(), 83.25);
    metrics.insert("val_loss".to_string(), 0.172);
    save_checkpoint(&path, &model, 7, &metrics, None).unwrap();

    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.epoch, 7);
    assert_eq!(loaded.metrics, metrics);
    assert_eq!(loaded.model.arch(), Arch::Deepmedic);
    assert_eq!(loaded.model.count_parameters(), model.count_parameters());
    for ((na, ta), (nb, tb)) in model.store().iter().zip(loaded.model.store().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "parameter {na} not bit-identical");
    }
    for (a, b) in model.norm_buffers().iter().zip(loaded.model.norm_buffers()) {
        assert_eq!(a.mean, b.mean, "buffer {}", a.name);
        assert_eq!(a.var, b.var, "buffer {}", a.name);
    }
    assert!(loaded.optimizer.is_none());
}

#[test]
fn checkpoint_restores_optimizer_momentum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("opt.ckpt");

    let mut model = Model::<f32>::build(Arch::Unet, 1, 0.25, 2).unwrap();
    let mut opt = Optimizer::<f32>::new(OptimKind::SgdNesterov, 0.01);
    let grads: Vec<Tensor<f32>> = model
        .store()
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| ((i % 3) as f32 - 1.0) * 1e-3))
        .collect();
    opt.step(model.store_mut().tensors_mut(), &grads).unwrap();
    opt.step(model.store_mut().tensors_mut(), &grads).unwrap();

    save_checkpoint(&path, &model, 2, &BTreeMap::new(), Some(&opt)).unwrap();
    let mut loaded = load_checkpoint::<f32>(&path).unwrap();
    let restored = loaded.optimizer.as_mut().unwrap();
    assert_eq!(restored.kind(), OptimKind::SgdNesterov);
    assert_eq!(restored.lr(), 0.01);

    // one more identical step on both copies must agree bit for bit
    opt.step(model.store_mut().tensors_mut(), &grads).unwrap();
    restored.step(loaded.model.store_mut().tensors_mut(), &grads).unwrap();
    for ((na, ta), (_, tb)) in model.store().iter().zip(loaded.model.store().iter()) {
        assert_eq!(ta.data(), tb.data(), "parameter {na} diverged after resume");
    }
}

#[test]
fn corrupt_checkpoints_name_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::build(Arch::Deepmedic, 1, 0.25, 0).unwrap();
    save_checkpoint(&path, &model, 0, &BTreeMap::new(), None).unwrap();

    // rewrite the manifest claiming a different width: the first weight
    // shape no longer matches the graph the manifest builds
    let bytes = std::fs::read(&path).unwrap();
    let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let manifest = String::from_utf8(bytes[14..14 + len].to_vec()).unwrap();
    let doctored = manifest.replace("\"width_scale\":0.25", "\"width_scale\":0.5");
    assert_ne!(manifest, doctored);
    let mut out = Vec::new();
    out.extend_from_slice(&bytes[..6]);
    out.extend_from_slice(&(doctored.len() as u64).to_le_bytes());
    out.extend_from_slice(doctored.as_bytes());
    out.extend_from_slice(&bytes[14 + len..]);
    std::fs::write(&path, out).unwrap();

    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(err.to_string().contains("hi.conv0.w"), "{err}");

    // wrong magic
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
