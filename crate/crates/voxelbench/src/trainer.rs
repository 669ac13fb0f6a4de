//! Cross-validation splitting, the fold training loop, dense inference,
//! fold ensembling, transfer fine-tuning, and the robustness and width
//! studies. A run directory holds everything needed to audit the run: the
//! config snapshot, the split, per-epoch metrics, fold checkpoints, test
//! predictions, and per-case scores.
//!
//! Every random draw is keyed by the experiment seed plus a purpose tag and
//! the (fold, epoch, step) coordinates, so runs are bit-reproducible and no
//! draw depends on scheduling order. Held-out test cases enter nothing but
//! the final evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{
    augment, crop_labels, crop_volume, normalize_intensity, remap_labels, write_volume, CaseEntry,
    Coding, DomainTag, LabelMap, Manifest, Volume,
};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::models::checkpoint::{load_checkpoint, save_checkpoint};
use crate::models::{collect_grads, Arch, Fwd, Model};
use crate::optim::{Optimizer, ScheduleAction};
use crate::sampler::{
    assemble_volume_batch, extract_input, sample_patch_batch, PatchSpec,
};
use crate::stats::{dsc_maps, mean_std, write_results, MeanStd, ResultRow};
use crate::tensor::ops::{channel_slice, Mode};
use crate::tensor::{Tape, Tensor, Var};

/// Order-sensitive FNV-1a fold of a tag and word list. One experiment seed
/// plus a key gives an independent ChaCha stream per purpose and position.
fn stream_key(tag: &str, parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1_0000_01b3);
        }
    }
    h
}

fn stream_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_key(tag, parts));
    rng
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// One fold's case partition. Lists are kept sorted so iteration order is
/// independent of how the split was drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSets {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// A full cross-validation split: a held-out test fraction plus `folds`
/// train/validation partitions of the remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: Vec<String>,
    pub folds: Vec<FoldSets>,
}

/// Split case ids into a held-out test set and `folds` cross-validation
/// partitions of the rest. Deterministic in (id set, folds, fraction, seed);
/// the order ids arrive in does not matter.
pub fn split_cases(
    ids: &[String],
    folds: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<FoldSplit> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::invalid("split", "duplicate case ids"));
    }
    let n = ids.len();
    if n < 10 {
        return Err(Error::invalid(
            "split",
            format!("{n} cases; cross-validation needs at least 10"),
        ));
    }
    if folds < 2 {
        return Err(Error::invalid("split", "need at least 2 folds"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(
            "split",
            format!("holdout fraction {holdout_fraction} outside (0, 1)"),
        ));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = stream_rng(seed, "split", &[]);
    shuffle(&mut order, &mut rng);

    let n_test = ((n as f64) * holdout_fraction).round().max(1.0) as usize;
    if n - n_test < folds {
        return Err(Error::invalid(
            "split",
            format!("holdout leaves {} cases for {folds} folds", n - n_test),
        ));
    }
    let (test, pool) = order.split_at(n_test);
    let mut test = test.to_vec();
    test.sort();

    let base = pool.len() / folds;
    let rem = pool.len() % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0;
    for k in 0..folds {
        let size = base + usize::from(k < rem);
        let start = at;
        at += size;
        let mut val: Vec<String> = pool[start..at].to_vec();
        let mut train: Vec<String> = pool[..start]
            .iter()
            .chain(&pool[at..])
            .cloned()
            .collect();
        val.sort();
        train.sort();
        out.push(FoldSets { train, val });
    }
    Ok(FoldSplit { test, folds: out })
}

/// A case after the full input pipeline: sequence selection, optional crop,
/// intensity normalization, and task remapping to binary labels.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub tag: DomainTag,
    pub volume: Volume,
    pub labels: LabelMap,
    pub labels_r2: Option<LabelMap>,
}

pub fn prepare_case(
    manifest: &Manifest,
    entry: &CaseEntry,
    cfg: &ExperimentConfig,
) -> Result<PreparedCase> {
    let (mut volume, mut labels, mut r2) = manifest.load_case(entry, &cfg.sequences)?;
    if let Some(bbox) = &cfg.crop {
        volume = crop_volume(&volume, bbox)?;
        labels = crop_labels(&labels, bbox)?;
        r2 = r2.map(|m| crop_labels(&m, bbox)).transpose()?;
    }
    let volume = normalize_intensity(&volume, cfg.normalization)?;
    let labels = remap_labels(&labels, cfg.task)?;
    let r2 = r2.map(|m| remap_labels(&m, cfg.task)).transpose()?;
    Ok(PreparedCase {
        id: entry.id.clone(),
        tag: entry.tag,
        volume,
        labels,
        labels_r2: r2,
    })
}

pub fn prepare_cases(manifest: &Manifest, cfg: &ExperimentConfig) -> Result<Vec<PreparedCase>> {
    manifest
        .cases
        .iter()
        .map(|e| prepare_case(manifest, e, cfg))
        .collect()
}

fn case_refs<'a>(
    cases: &'a [PreparedCase],
    ids: &[String],
    what: &str,
) -> Result<Vec<&'a PreparedCase>> {
    ids.iter()
        .map(|id| {
            cases
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| Error::invalid("trainer", format!("{what} case {id} not prepared")))
        })
        .collect()
}

/// Output-tile origins covering `[0, extent)`: stride `tile`, with the last
/// origin shifted inward so the final tile ends exactly at the border.
/// Overlapping voxels get identical values from either tile because each
/// output voxel's receptive field is the same absolute window regardless of
/// which tile computes it.
fn tile_origins(extent: usize, tile: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut v = 0;
    loop {
        if v + tile >= extent {
            out.push(extent - tile);
            break;
        }
        out.push(v);
        v += tile;
    }
    out
}

/// Dense probability map `[2, X, Y, Z]` for one volume. The full-volume net
/// runs in a single padded pass; the patch net tiles the output grid and
/// stitches non-overlapping output cubes.
pub fn predict_volume(
    model: &mut Model<f32>,
    volume: &Volume,
    spec: &PatchSpec,
) -> Result<Tensor<f32>> {
    let c = volume.channels();
    if c != model.in_channels() {
        return Err(Error::invalid(
            "predict",
            format!("volume has {c} channels, model expects {}", model.in_channels()),
        ));
    }
    let [x, y, z] = volume.extents();
    // inference has no stochastic layers; the rng is never consulted
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match model.arch() {
        Arch::Unet => {
            let input = volume.data.reshape(&[1, c, x, y, z])?;
            let fwd = model.forward_volume(None, &input, Mode::Infer, &mut rng)?;
            fwd.probs.value().reshape(&[2, x, y, z])
        }
        Arch::Deepmedic => {
            spec.validate()?;
            let oe = spec.output_extent;
            for (axis, e) in [x, y, z].into_iter().enumerate() {
                if e < oe {
                    return Err(Error::invalid(
                        "predict",
                        format!(
                            "axis {}: extent {e} smaller than output tile {oe}",
                            ["x", "y", "z"][axis]
                        ),
                    ));
                }
            }
            let he = spec.high_res_extent;
            let le = spec.low_res_extent();
            let nvox = x * y * z;
            let tvox = oe * oe * oe;
            let mut out = vec![0f32; 2 * nvox];

            let mut tiles = Vec::new();
            for &ox in &tile_origins(x, oe) {
                for &oy in &tile_origins(y, oe) {
                    for &oz in &tile_origins(z, oe) {
                        tiles.push([ox, oy, oz]);
                    }
                }
            }
            const TILES_PER_PASS: usize = 27;
            for chunk in tiles.chunks(TILES_PER_PASS) {
                let b = chunk.len();
                let mut hi = Vec::with_capacity(b * c * he * he * he);
                let mut lo = Vec::with_capacity(b * c * le * le * le);
                for &[ox, oy, oz] in chunk {
                    let center = [ox + oe / 2, oy + oe / 2, oz + oe / 2];
                    let (h, l) = extract_input(volume, center, spec)?;
                    hi.extend_from_slice(h.data());
                    lo.extend_from_slice(l.data());
                }
                let hi = Tensor::new(&[b, c, he, he, he], hi)?;
                let lo = Tensor::new(&[b, c, le, le, le], lo)?;
                let fwd = model.forward_patches(None, &hi, &lo, Mode::Infer, &mut rng)?;
                let probs = fwd.probs.value().data();
                for (bi, &[ox, oy, oz]) in chunk.iter().enumerate() {
                    for ch in 0..2 {
                        let src0 = (bi * 2 + ch) * tvox;
                        for i in 0..oe {
                            for j in 0..oe {
                                let s0 = src0 + (i * oe + j) * oe;
                                let d0 = ch * nvox + ((ox + i) * y + oy + j) * z + oz;
                                out[d0..d0 + oe].copy_from_slice(&probs[s0..s0 + oe]);
                            }
                        }
                    }
                }
            }
            Tensor::new(&[2, x, y, z], out)
        }
    }
}

/// Threshold the foreground channel of a `[2, X, Y, Z]` probability map.
pub fn mask_from_probs(probs: &Tensor<f32>, threshold: f32) -> Result<LabelMap> {
    let s = probs.shape();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::invalid(
            "mask",
            format!("expected a [2, X, Y, Z] probability map, got {s:?}"),
        ));
    }
    let nvox = s[1] * s[2] * s[3];
    let data = probs.data()[nvox..]
        .iter()
        .map(|&p| u8::from(p >= threshold))
        .collect();
    LabelMap::new([s[1], s[2], s[3]], data, Coding::Binary)
}

fn fg_channel(probs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = probs.shape().to_vec();
    let nvox = s[1] * s[2] * s[3];
    Tensor::new(&[1, 1, s[1], s[2], s[3]], probs.data()[nvox..].to_vec())
}

struct ValSummary {
    loss: f64,
    dsc: f64,
}

/// Full-volume loss and overlap for a case list, averaged per case. Both
/// architectures are scored on dense maps so the schedule sees the same
/// quantity it would at test time.
fn evaluate_model(
    model: &mut Model<f32>,
    cases: &[&PreparedCase],
    loss: &LossKind,
    spec: &PatchSpec,
) -> Result<ValSummary> {
    if cases.is_empty() {
        return Err(Error::invalid("trainer", "evaluation set is empty"));
    }
    let mut loss_sum = 0.0;
    let mut dsc_sum = 0.0;
    for case in cases {
        let probs = predict_volume(model, &case.volume, spec)?;
        let fg = Var::constant(fg_channel(&probs)?);
        let target = case.labels.as_target::<f32>()?;
        let l = f64::from(loss.evaluate(None, &fg, &target)?.value().data()[0]);
        if !l.is_finite() {
            return Err(Error::Divergence {
                context: format!("validation loss on case {}", case.id),
            });
        }
        loss_sum += l;
        let mask = mask_from_probs(&probs, 0.5)?;
        dsc_sum += dsc_maps(&mask, &case.labels)?.percent;
    }
    let n = cases.len() as f64;
    Ok(ValSummary {
        loss: loss_sum / n,
        dsc: dsc_sum / n,
    })
}

/// Nominal patch steps per epoch: enough output cubes to cover the training
/// pool's brain voxels once, clamped by the configured cap.
fn patch_steps(train: &[&PreparedCase], cfg: &ExperimentConfig) -> usize {
    let brain: usize = train
        .iter()
        .map(|c| c.volume.brain_mask().iter().filter(|&&m| m).count())
        .sum();
    let per_step = cfg.sampler.batch_size * cfg.sampler.patch.output_extent.pow(3);
    brain
        .div_ceil(per_step.max(1))
        .clamp(1, cfg.train.batches_per_epoch_cap)
}

/// Volume steps per epoch: every training case once, in `volume_batch`
/// groups, clamped by the configured cap.
fn volume_steps(n_train: usize, cfg: &ExperimentConfig) -> usize {
    n_train
        .div_ceil(cfg.sampler.volume_batch)
        .clamp(1, cfg.train.batches_per_epoch_cap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub stopped_early: bool,
    /// One record per executed epoch, in order.
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

fn write_metrics(out_dir: &Path, fold: usize, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch\ttrain_loss\tval_loss\tval_dsc\tlr\n");
    for r in history {
        let _ = writeln!(
            text,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:e}",
            r.epoch, r.train_loss, r.val_loss, r.val_dsc, r.lr
        );
    }
    let path = out_dir.join(format!("fold{fold}_metrics.tsv"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One optimizer step from an already-run forward pass: foreground slice,
/// loss, backward, parameter update. Returns the scalar loss.
fn train_step(
    cfg: &ExperimentConfig,
    model: &mut Model<f32>,
    optimizer: &mut Optimizer<f32>,
    tape: Tape<f32>,
    fwd: Fwd<f32>,
    targets: &Tensor<f32>,
    fold: usize,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let fg = channel_slice(Some(&tape), &fwd.probs, 1)?;
    let loss = cfg.loss.evaluate(Some(&tape), &fg, targets)?;
    let lv = f64::from(loss.value().data()[0]);
    if !lv.is_finite() {
        return Err(Error::Divergence {
            context: format!("fold {fold} epoch {epoch} step {step}: training loss {lv}"),
        });
    }
    let mut grads = tape.backward(&loss)?;
    let g = collect_grads(&mut grads, &fwd.params);
    optimizer.step(model.store_mut().tensors_mut(), &g)?;
    Ok(lv)
}

/// Train one fold to its best-validation-overlap checkpoint.
///
/// The patch net draws weighted patch batches; the full-volume net sees
/// every training case once per epoch in small batches. Both validate with
/// dense inference after each epoch, and the plateau schedule watching the
/// validation loss drives learning-rate drops and early stopping. The
/// checkpoint on disk is always the epoch with the highest validation
/// overlap, never the lowest loss. With `transfer` set, training starts
/// from the source checkpoint's weights instead of a fresh initialization;
/// all layers stay trainable.
pub fn train_fold(
    cfg: &ExperimentConfig,
    cases: &[PreparedCase],
    sets: &FoldSets,
    fold: usize,
    out_dir: &Path,
) -> Result<FoldOutcome> {
    let train = case_refs(cases, &sets.train, "training")?;
    let val = case_refs(cases, &sets.val, "validation")?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("trainer", "empty training or validation set"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let seed = cfg.train.seed;
    let in_ch = cfg.sequences.len();
    let mut model = match &cfg.transfer {
        Some(t) => {
            let loaded = load_checkpoint::<f32>(&t.source_checkpoint)?;
            let m = loaded.model;
            if m.arch() != cfg.model.arch
                || m.in_channels() != in_ch
                || m.width_scale() != cfg.model.width_scale
            {
                return Err(Error::invalid(
                    "trainer",
                    format!(
                        "source checkpoint ({:?}, {} channels, width {}) does not match \
                         config ({:?}, {} channels, width {})",
                        m.arch(),
                        m.in_channels(),
                        m.width_scale(),
                        cfg.model.arch,
                        in_ch,
                        cfg.model.width_scale
                    ),
                ));
            }
            m
        }
        None => Model::build(
            cfg.model.arch,
            in_ch,
            cfg.model.width_scale,
            stream_key("init", &[seed, fold as u64]),
        )?,
    };

    let opt_cfg = cfg.resolved_optimizer();
    let mut optimizer: Optimizer<f32> = Optimizer::new(opt_cfg.kind, opt_cfg.lr as f32);
    let mut schedule = cfg.schedule.build();
    let spec = &cfg.sampler.patch;
    let ckpt_path = out_dir.join(format!("fold{fold}.ckpt"));

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;

    if cfg.train.max_epochs == 0 {
        // untrained baseline: score the initialization and store it as-is
        let v = evaluate_model(&mut model, &val, &cfg.loss, spec)?;
        let metrics = BTreeMap::from([
            ("val_dsc".to_string(), v.dsc),
            ("val_loss".to_string(), v.loss),
        ]);
        save_checkpoint(&ckpt_path, &model, 0, &metrics, None)?;
        write_metrics(out_dir, fold, &history)?;
        return Ok(FoldOutcome {
            fold,
            best_epoch: 0,
            best_val_dsc: v.dsc,
            stopped_early: false,
            history,
            checkpoint: ckpt_path,
        });
    }

    let steps = match cfg.model.arch {
        Arch::Deepmedic => patch_steps(&train, cfg),
        Arch::Unet => volume_steps(train.len(), cfg),
    };

    for epoch in 0..cfg.train.max_epochs {
        let aug: Vec<(Volume, LabelMap)> = if cfg.augment.is_identity() {
            Vec::new()
        } else {
            train
                .iter()
                .map(|c| {
                    augment(
                        &c.volume,
                        &c.labels,
                        &cfg.augment,
                        stream_key("augment", &[seed, fold as u64]),
                        epoch,
                    )
                })
                .collect::<Result<_>>()?
        };
        let pairs: Vec<(&Volume, &LabelMap)> = if aug.is_empty() {
            train.iter().map(|c| (&c.volume, &c.labels)).collect()
        } else {
            aug.iter().map(|(v, l)| (v, l)).collect()
        };

        let mut loss_sum = 0.0;
        match cfg.model.arch {
            Arch::Deepmedic => {
                for step in 0..steps {
                    let coords = [fold as u64, epoch as u64, step as u64];
                    let mut rng = stream_rng(seed, "sample", &coords);
                    let batch = sample_patch_batch(
                        &pairs,
                        spec,
                        cfg.sampler.batch_size,
                        cfg.sampler.fg_fraction,
                        cfg.sampler.max_subjects,
                        &mut rng,
                    )?;
                    let tape = Tape::new();
                    let mut drop_rng = stream_rng(seed, "dropout", &coords);
                    let fwd = model.forward_patches(
                        Some(&tape),
                        &batch.hi,
                        &batch.lo,
                        Mode::Train,
                        &mut drop_rng,
                    )?;
                    loss_sum += train_step(
                        cfg,
                        &mut model,
                        &mut optimizer,
                        tape,
                        fwd,
                        &batch.targets,
                        fold,
                        epoch,
                        step,
                    )?;
                }
            }
            Arch::Unet => {
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                let mut rng = stream_rng(seed, "order", &[fold as u64, epoch as u64]);
                shuffle(&mut order, &mut rng);
                for (step, chunk) in order.chunks(cfg.sampler.volume_batch).take(steps).enumerate()
                {
                    let sel: Vec<(&Volume, &LabelMap)> =
                        chunk.iter().map(|&i| pairs[i]).collect();
                    let batch = assemble_volume_batch(&sel)?;
                    let tape = Tape::new();
                    let mut drop_rng =
                        stream_rng(seed, "dropout", &[fold as u64, epoch as u64, step as u64]);
                    let fwd = model.forward_volume(
                        Some(&tape),
                        &batch.inputs,
                        Mode::Train,
                        &mut drop_rng,
                    )?;
                    loss_sum += train_step(
                        cfg,
                        &mut model,
                        &mut optimizer,
                        tape,
                        fwd,
                        &batch.targets,
                        fold,
                        epoch,
                        step,
                    )?;
                }
            }
        }
        let train_loss = loss_sum / steps as f64;

        let v = evaluate_model(&mut model, &val, &cfg.loss, spec)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_dsc: v.dsc,
            lr: f64::from(optimizer.lr()),
        });

        if v.dsc > best_dsc {
            best_dsc = v.dsc;
            best_epoch = epoch;
            let metrics = BTreeMap::from([
                ("val_dsc".to_string(), v.dsc),
                ("val_loss".to_string(), v.loss),
                ("train_loss".to_string(), train_loss),
            ]);
            save_checkpoint(&ckpt_path, &model, epoch, &metrics, None)?;
        }

        match schedule.observe(v.loss) {
            ScheduleAction::Continue => {}
            ScheduleAction::ReduceLr => {
                let lr = optimizer.lr() / cfg.schedule.factor as f32;
                optimizer.set_lr(lr);
            }
            ScheduleAction::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    write_metrics(out_dir, fold, &history)?;
    Ok(FoldOutcome {
        fold,
        best_epoch,
        best_val_dsc: best_dsc,
        stopped_early,
        history,
        checkpoint: ckpt_path,
    })
}

/// Voxelwise mean of each member's probability map. Members must agree in
/// architecture, input channels, and width.
pub fn ensemble_predict(
    models: &mut [Model<f32>],
    volume: &Volume,
    spec: &PatchSpec,
) -> Result<Tensor<f32>> {
    let (arch, ch, width) = match models.first() {
        Some(m) => (m.arch(), m.in_channels(), m.width_scale()),
        None => return Err(Error::invalid("ensemble", "no models given")),
    };
    for m in models.iter() {
        if m.arch() != arch || m.in_channels() != ch || m.width_scale() != width {
            return Err(Error::invalid(
                "ensemble",
                "members disagree in architecture, channels, or width",
            ));
        }
    }
    let mut acc: Vec<f32> = Vec::new();
    let mut shape: Vec<usize> = Vec::new();
    for m in models.iter_mut() {
        let p = predict_volume(m, volume, spec)?;
        if acc.is_empty() {
            shape = p.shape().to_vec();
            acc = p.data().to_vec();
        } else {
            for (a, &v) in acc.iter_mut().zip(p.data()) {
                *a += v;
            }
        }
    }
    let n = models.len() as f32;
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(&shape, acc)
}

/// Score one predicted mask against a case's delineations, producing one
/// result row per rater.
pub fn score_case(
    mask: &LabelMap,
    case: &PreparedCase,
    cfg: &ExperimentConfig,
    model_tag: &str,
    fold: &str,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let r1 = dsc_maps(mask, &case.labels)?;
    rows.push(ResultRow {
        case_id: case.id.clone(),
        task: cfg.task,
        sequences: cfg.sequences.clone(),
        model: model_tag.to_string(),
        fold: fold.to_string(),
        rater: "r1".to_string(),
        dsc_percent: r1.percent,
    });
    if let Some(second) = &case.labels_r2 {
        let r2 = dsc_maps(mask, second)?;
        rows.push(ResultRow {
            case_id: case.id.clone(),
            task: cfg.task,
            sequences: cfg.sequences.clone(),
            model: model_tag.to_string(),
            fold: fold.to_string(),
            rater: "r2".to_string(),
            dsc_percent: r2.percent,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub split: FoldSplit,
    pub folds: Vec<FoldOutcome>,
    /// Ensemble-on-test rows, one per case and rater.
    pub rows: Vec<ResultRow>,
    pub test_mean: Option<MeanStd>,
    pub results_path: PathBuf,
}

fn arch_tag(arch: Arch) -> &'static str {
    match arch {
        Arch::Deepmedic => "deepmedic",
        Arch::Unet => "unet",
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The full protocol for one configuration: split, train every fold,
/// ensemble the fold checkpoints, and score the ensemble once on the
/// held-out test cases. The run directory receives the config snapshot,
/// the split, per-fold metrics and checkpoints, test predictions, and the
/// per-case score table.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    model_tag: Option<&str>,
    out_dir: &Path,
) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &crate::config::echo(cfg))?;

    let manifest = Manifest::load(&cfg.manifest)?;
    let ids: Vec<String> = manifest.cases.iter().map(|c| c.id.clone()).collect();
    let split = split_cases(&ids, cfg.split.folds, cfg.split.holdout_fraction, cfg.split.seed)?;
    let split_json = serde_json::to_string_pretty(&split)
        .map_err(|e| Error::invalid("trainer", format!("split encode: {e}")))?;
    write_text(&out_dir.join("split.json"), &split_json)?;

    let cases = prepare_cases(&manifest, cfg)?;
    let tag = model_tag.unwrap_or(arch_tag(cfg.model.arch));

    let mut folds = Vec::with_capacity(split.folds.len());
    for (k, sets) in split.folds.iter().enumerate() {
        folds.push(train_fold(cfg, &cases, sets, k, out_dir)?);
    }

    let mut models: Vec<Model<f32>> = folds
        .iter()
        .map(|f| load_checkpoint::<f32>(&f.checkpoint).map(|l| l.model))
        .collect::<Result<_>>()?;
    let test = case_refs(&cases, &split.test, "test")?;
    let pred_dir = out_dir.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;

    let mut rows = Vec::new();
    let mut r1_scores = Vec::new();
    for case in &test {
        let probs = ensemble_predict(&mut models, &case.volume, &cfg.sampler.patch)?;
        let pred = Volume {
            data: probs.clone(),
            spacing_mm: case.volume.spacing_mm,
            channel_names: vec!["p_background".to_string(), "p_foreground".to_string()],
            case_id: case.id.clone(),
        };
        write_volume(&pred, &pred_dir.join(format!("{}.vvol", case.id)))?;
        let mask = mask_from_probs(&probs, 0.5)?;
        let case_rows = score_case(&mask, case, cfg, tag, "ens")?;
        r1_scores.push(case_rows[0].dsc_percent);
        rows.extend(case_rows);
    }

    let results_path = out_dir.join("results.tsv");
    write_text(&results_path, &write_results(&rows))?;
    let test_mean = mean_std(&r1_scores);
    Ok(ExperimentOutcome {
        split,
        folds,
        rows,
        test_mean,
        results_path,
    })
}

/// Zero-shot and fine-tuned overlap for one target test case, per rater.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub zero_shot: f64,
    pub fine_tuned: f64,
    pub zero_shot_r2: Option<f64>,
    pub fine_tuned_r2: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub scores: Vec<CaseScore>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

fn rater_scores(
    model: &mut Model<f32>,
    case: &PreparedCase,
    spec: &PatchSpec,
) -> Result<(f64, Option<f64>)> {
    let probs = predict_volume(model, &case.volume, spec)?;
    let mask = mask_from_probs(&probs, 0.5)?;
    let r1 = dsc_maps(&mask, &case.labels)?.percent;
    let r2 = match &case.labels_r2 {
        Some(second) => Some(dsc_maps(&mask, second)?.percent),
        None => None,
    };
    Ok((r1, r2))
}

/// Adapt a source-trained checkpoint to a target corpus: half the cases
/// (rounded down) become the tuning pool, the rest the target test set.
/// Test cases are scored twice with the same dense-inference path, once
/// with the source weights untouched (zero-shot) and once after
/// fine-tuning, so with `max_epochs = 0` the two columns are identical by
/// construction. The plateau schedule watches loss on the tuning pool,
/// which doubles as the validation set since every remaining target case
/// is reserved for testing.
pub fn fine_tune(
    cfg: &ExperimentConfig,
    cases: &[PreparedCase],
    out_dir: &Path,
) -> Result<TransferOutcome> {
    let source = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::invalid("transfer", "transfer.source_checkpoint not set"))?;
    if cases.len() < 2 {
        return Err(Error::invalid("transfer", "need at least 2 target cases"));
    }
    let mut order: Vec<String> = {
        let unique: BTreeSet<&str> = cases.iter().map(|c| c.id.as_str()).collect();
        if unique.len() != cases.len() {
            return Err(Error::invalid("transfer", "duplicate case ids"));
        }
        unique.into_iter().map(String::from).collect()
    };
    let mut rng = stream_rng(cfg.split.seed, "transfer", &[]);
    shuffle(&mut order, &mut rng);
    let n_train = cases.len() / 2;
    let mut train_ids: Vec<String> = order[..n_train].to_vec();
    let mut test_ids: Vec<String> = order[n_train..].to_vec();
    train_ids.sort();
    test_ids.sort();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut source_model = load_checkpoint::<f32>(&source.source_checkpoint)?.model;
    let spec = &cfg.sampler.patch;
    let test = case_refs(cases, &test_ids, "target test")?;

    let mut zero = Vec::with_capacity(test.len());
    for case in &test {
        zero.push(rater_scores(&mut source_model, case, spec)?);
    }
    drop(source_model);

    let sets = FoldSets {
        train: train_ids.clone(),
        val: train_ids.clone(),
    };
    let run = train_fold(cfg, cases, &sets, 0, out_dir)?;
    let mut tuned = load_checkpoint::<f32>(&run.checkpoint)?.model;

    let mut scores = Vec::with_capacity(test.len());
    for (case, (zs, zs_r2)) in test.iter().zip(zero) {
        let (ft, ft_r2) = rater_scores(&mut tuned, case, spec)?;
        scores.push(CaseScore {
            case_id: case.id.clone(),
            zero_shot: zs,
            fine_tuned: ft,
            zero_shot_r2: zs_r2,
            fine_tuned_r2: ft_r2,
        });
    }

    let mut table = String::from("case_id\tzero_shot\tfine_tuned\tzero_shot_r2\tfine_tuned_r2\n");
    for s in &scores {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{:.6}\t{}\t{}",
            s.case_id,
            s.zero_shot,
            s.fine_tuned,
            fmt_opt(s.zero_shot_r2),
            fmt_opt(s.fine_tuned_r2)
        );
    }
    write_text(&out_dir.join("transfer.tsv"), &table)?;

    Ok(TransferOutcome {
        train_ids,
        test_ids,
        scores,
        history: run.history,
        checkpoint: run.checkpoint,
    })
}

#[derive(Clone, Debug)]
pub struct RerunOutcome {
    /// Mean best-validation overlap across folds, one entry per seed.
    pub per_run_mean_val_dsc: Vec<f64>,
    pub summary: Option<MeanStd>,
}

/// Repeat the cross-validation training under different initialization and
/// sampling seeds while holding the split fixed, to measure run-to-run
/// spread. Identical seeds give identical runs, so the spread is zero.
pub fn robustness_rerun(
    cfg: &ExperimentConfig,
    cases: &[PreparedCase],
    split: &FoldSplit,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<RerunOutcome> {
    if seeds.len() < 2 {
        return Err(Error::invalid("rerun", "need at least two seeds"));
    }
    let mut per_run = Vec::with_capacity(seeds.len());
    for (k, &s) in seeds.iter().enumerate() {
        let mut c = cfg.clone();
        c.train.seed = s;
        let dir = out_dir.join(format!("run{k}"));
        let mut sum = 0.0;
        for (f, sets) in split.folds.iter().enumerate() {
            sum += train_fold(&c, cases, sets, f, &dir)?.best_val_dsc;
        }
        per_run.push(sum / split.folds.len() as f64);
    }
    Ok(RerunOutcome {
        summary: mean_std(&per_run),
        per_run_mean_val_dsc: per_run,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub width_scale: f64,
    pub parameters: usize,
    pub test_dsc: f64,
}

/// Capacity study: one trained fold per width factor, scored on the
/// held-out test cases.
pub fn width_sweep(
    cfg: &ExperimentConfig,
    cases: &[PreparedCase],
    split: &FoldSplit,
    factors: &[f64],
    out_dir: &Path,
) -> Result<Vec<WidthRow>> {
    if factors.is_empty() {
        return Err(Error::invalid("sweep", "no width factors given"));
    }
    let test = case_refs(cases, &split.test, "test")?;
    let mut rows = Vec::with_capacity(factors.len());
    for (k, &w) in factors.iter().enumerate() {
        let mut c = cfg.clone();
        c.model.width_scale = w;
        c.validate()?;
        let dir = out_dir.join(format!("width{k}"));
        let run = train_fold(&c, cases, &split.folds[0], 0, &dir)?;
        let mut model = load_checkpoint::<f32>(&run.checkpoint)?.model;
        let parameters = model.count_parameters();
        let mut sum = 0.0;
        for case in &test {
            let probs = predict_volume(&mut model, &case.volume, &c.sampler.patch)?;
            sum += dsc_maps(&mask_from_probs(&probs, 0.5)?, &case.labels)?.percent;
        }
        rows.push(WidthRow {
            width_scale: w,
            parameters,
            test_dsc: sum / test.len() as f64,
        });
    }
    Ok(rows)
}
