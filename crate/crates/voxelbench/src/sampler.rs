//! Patch extraction and batch assembly. The patch network trains on pairs
//! of crops (a high-resolution window and a 3x-downsampled context window)
//! with class-weighted center sampling; the volumetric network trains on
//! small batches of whole volumes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Coding, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::ops::avgpool3;
use crate::tensor::Tensor;

/// Geometry of one training sample for the patch network.
///
/// The high-resolution window shrinks by 16 through eight valid 3-voxel
/// convolutions; the context window is `downsample_factor` times the extent
/// the low-resolution pathway needs to produce the same output after
/// upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub high_res_extent: usize,
    pub context_extent: usize,
    pub downsample_factor: usize,
    pub output_extent: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            high_res_extent: 25,
            context_extent: 57,
            downsample_factor: 3,
            output_extent: 9,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.downsample_factor;
        if d != 3 {
            return Err(Error::invalid(
                "patch_spec",
                format!("downsample factor {d} unsupported; pooling is stride 3"),
            ));
        }
        if self.high_res_extent <= 16 {
            return Err(Error::invalid(
                "patch_spec",
                format!("extents too small: {self:?}"),
            ));
        }
        if self.output_extent != self.high_res_extent - 16 {
            return Err(Error::invalid(
                "patch_spec",
                format!(
                    "output extent {} must be high-res extent minus 16",
                    self.output_extent
                ),
            ));
        }
        if self.output_extent % d != 0 {
            return Err(Error::invalid(
                "patch_spec",
                format!("output extent {} not divisible by {d}", self.output_extent),
            ));
        }
        let low_extent = self.output_extent / d + 16;
        if self.context_extent != d * low_extent {
            return Err(Error::invalid(
                "patch_spec",
                format!(
                    "context extent {} inconsistent: want {} ({}x{low_extent})",
                    self.context_extent,
                    d * low_extent,
                    d
                ),
            ));
        }
        Ok(())
    }

    pub fn low_res_extent(&self) -> usize {
        self.context_extent / self.downsample_factor
    }
}

/// One extracted sample: input crops plus the aligned target block.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub case_id: String,
    pub center: [usize; 3],
    /// `[C, high, high, high]`
    pub hi: Tensor<f32>,
    /// `[C, low, low, low]`, context crop after average pooling
    pub lo: Tensor<f32>,
    /// `[1, out, out, out]` binary foreground
    pub target: Tensor<f32>,
}

/// Draw patch centers: `round(n * fg_fraction)` uniform over foreground
/// voxels, the rest uniform over in-mask background. If the foreground is
/// empty the whole batch falls back to uniform in-mask sampling and the
/// returned flag is set.
pub fn sample_centers(
    mask: &[bool],
    foreground: &[bool],
    extents: [usize; 3],
    n: usize,
    fg_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[usize; 3]>, bool)> {
    let nvox = extents[0] * extents[1] * extents[2];
    if mask.len() != nvox || foreground.len() != nvox {
        return Err(Error::invalid(
            "sample_centers",
            format!("mask sizes {} / {} for extents {extents:?}", mask.len(), foreground.len()),
        ));
    }
    if !(0.0..=1.0).contains(&fg_fraction) {
        return Err(Error::invalid(
            "sample_centers",
            format!("fg_fraction {fg_fraction} outside [0, 1]"),
        ));
    }
    let mask_idx: Vec<usize> = (0..nvox).filter(|&i| mask[i]).collect();
    if mask_idx.is_empty() {
        return Err(Error::invalid("sample_centers", "empty mask"));
    }
    let fg_idx: Vec<usize> = (0..nvox).filter(|&i| foreground[i]).collect();
    let mut n_fg = (n as f64 * fg_fraction).round() as usize;
    if n_fg > n {
        n_fg = n;
    }

    let mut fallback = false;
    let mut centers = Vec::with_capacity(n);
    if n_fg > 0 && fg_idx.is_empty() {
        fallback = true;
        for _ in 0..n {
            centers.push(unflatten(mask_idx[rng.gen_range(0..mask_idx.len())], extents));
        }
        return Ok((centers, fallback));
    }

    for _ in 0..n_fg {
        centers.push(unflatten(fg_idx[rng.gen_range(0..fg_idx.len())], extents));
    }
    // background draws come from in-mask voxels that are not foreground;
    // if the mask is entirely foreground, fall back to the mask itself
    let bg_idx: Vec<usize> = (0..nvox).filter(|&i| mask[i] && !foreground[i]).collect();
    let pool = if bg_idx.is_empty() { &mask_idx } else { &bg_idx };
    for _ in n_fg..n {
        centers.push(unflatten(pool[rng.gen_range(0..pool.len())], extents));
    }
    Ok((centers, fallback))
}

fn unflatten(i: usize, extents: [usize; 3]) -> [usize; 3] {
    [
        i / (extents[1] * extents[2]),
        (i / extents[2]) % extents[1],
        i % extents[2],
    ]
}

/// Crop a cube of `extent` centered at `center` out of one grid channel,
/// reading zero outside the volume.
fn crop_cube(
    src: &[f32],
    extents: [usize; 3],
    center: [usize; 3],
    extent: usize,
    dst: &mut Vec<f32>,
) {
    let r = (extent / 2) as isize;
    let [ex, ey, ez] = [extents[0] as isize, extents[1] as isize, extents[2] as isize];
    for dx in -r..=r {
        let x = center[0] as isize + dx;
        for dy in -r..=r {
            let y = center[1] as isize + dy;
            if x < 0 || x >= ex || y < 0 || y >= ey {
                dst.extend(std::iter::repeat(0.0).take(extent));
                continue;
            }
            let row = ((x * ey + y) * ez) as usize;
            for dz in -r..=r {
                let z = center[2] as isize + dz;
                if z < 0 || z >= ez {
                    dst.push(0.0);
                } else {
                    dst.push(src[row + z as usize]);
                }
            }
        }
    }
}

/// Extract the two input crops at `center` without a target, for inference
/// tiling. Returns `(hi [C,high^3], lo [C,low^3])`; out-of-volume reads are
/// zero-filled, so any in-volume center is valid.
pub fn extract_input(
    volume: &Volume,
    center: [usize; 3],
    spec: &PatchSpec,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let extents = volume.extents();
    for (axis, &c) in center.iter().enumerate() {
        if c >= extents[axis] {
            return Err(Error::invalid(
                "extract_patch",
                format!("center {center:?} outside volume {extents:?} on axis {axis}"),
            ));
        }
    }
    let c = volume.channels();
    let nvox = extents[0] * extents[1] * extents[2];
    let src = volume.data.data();

    let he = spec.high_res_extent;
    let mut hi = Vec::with_capacity(c * he * he * he);
    for ch in 0..c {
        crop_cube(&src[ch * nvox..(ch + 1) * nvox], extents, center, he, &mut hi);
    }
    let hi = Tensor::new(&[c, he, he, he], hi)?;

    let ce = spec.context_extent;
    let mut ctx = Vec::with_capacity(c * ce * ce * ce);
    for ch in 0..c {
        crop_cube(&src[ch * nvox..(ch + 1) * nvox], extents, center, ce, &mut ctx);
    }
    let ctx = Tensor::new(&[1, c, ce, ce, ce], ctx)?;
    let le = spec.low_res_extent();
    let lo = avgpool3(&ctx)?.reshape(&[c, le, le, le])?;
    Ok((hi, lo))
}

/// Extract one sample at `center`. Out-of-volume reads are zero-filled, so
/// any in-volume center is valid.
pub fn extract_patch(
    volume: &Volume,
    labels: &LabelMap,
    center: [usize; 3],
    spec: &PatchSpec,
) -> Result<PatchSample> {
    if labels.coding != Coding::Binary {
        return Err(Error::invalid("extract_patch", "labels must be binary; remap first"));
    }
    let extents = volume.extents();
    if labels.extents != extents {
        return Err(Error::invalid(
            "extract_patch",
            format!("label extents {:?} vs image {:?}", labels.extents, extents),
        ));
    }
    let (hi, lo) = extract_input(volume, center, spec)?;

    let oe = spec.output_extent;
    let mut target = Vec::with_capacity(oe * oe * oe);
    let codes: Vec<f32> = labels.data.iter().map(|&c| c as f32).collect();
    crop_cube(&codes, extents, center, oe, &mut target);
    let target = Tensor::new(&[1, oe, oe, oe], target)?;

    Ok(PatchSample {
        case_id: volume.case_id.clone(),
        center,
        hi,
        lo,
        target,
    })
}

/// A stacked patch batch ready for the dual-pathway network.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[B, C, high, high, high]`
    pub hi: Tensor<f32>,
    /// `[B, C, low, low, low]`
    pub lo: Tensor<f32>,
    /// `[B, 1, out, out, out]`
    pub targets: Tensor<f32>,
    pub case_ids: Vec<String>,
    pub centers: Vec<[usize; 3]>,
    /// Set when foreground sampling had to fall back to uniform.
    pub fallback: bool,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.hi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack(parts: Vec<&Tensor<f32>>) -> Result<Tensor<f32>> {
    let shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in &parts {
        if p.shape() != shape {
            return Err(Error::invalid(
                "assemble_batch",
                format!("sample shapes differ: {:?} vs {:?}", p.shape(), shape),
            ));
        }
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(&out_shape, data)
}

/// Stack samples into one batch. The patch network's batches may mix at
/// most `max_subjects` distinct cases.
pub fn assemble_patch_batch(
    samples: &[PatchSample],
    max_subjects: usize,
    fallback: bool,
) -> Result<PatchBatch> {
    if samples.is_empty() {
        return Err(Error::invalid("assemble_batch", "no samples"));
    }
    let mut subjects: Vec<&str> = samples.iter().map(|s| s.case_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() > max_subjects {
        return Err(Error::invalid(
            "assemble_batch",
            format!(
                "{} distinct subjects in one batch exceeds the limit of {max_subjects}",
                subjects.len()
            ),
        ));
    }
    Ok(PatchBatch {
        hi: stack(samples.iter().map(|s| &s.hi).collect())?,
        lo: stack(samples.iter().map(|s| &s.lo).collect())?,
        targets: stack(samples.iter().map(|s| &s.target).collect())?,
        case_ids: samples.iter().map(|s| s.case_id.clone()).collect(),
        centers: samples.iter().map(|s| s.center).collect(),
        fallback,
    })
}

/// Build one training batch for the patch network: pick up to
/// `max_subjects` cases, split `batch_size` patches across them, and hold
/// the batch-wide foreground quota at exactly `round(batch_size *
/// fg_fraction)`.
pub fn sample_patch_batch(
    cases: &[(&Volume, &LabelMap)],
    spec: &PatchSpec,
    batch_size: usize,
    fg_fraction: f64,
    max_subjects: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    if cases.is_empty() || batch_size == 0 || max_subjects == 0 {
        return Err(Error::invalid("sample_batch", "empty case pool or zero sizes"));
    }
    // choose distinct subjects
    let chosen: Vec<usize> = if cases.len() <= max_subjects {
        (0..cases.len()).collect()
    } else {
        let mut idx: Vec<usize> = (0..cases.len()).collect();
        for i in 0..max_subjects {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(max_subjects);
        idx
    };
    let k = chosen.len();

    // patches per subject, then the batch-wide foreground quota spread
    // across subjects by largest remainder
    let mut quota = vec![batch_size / k; k];
    for q in quota.iter_mut().take(batch_size % k) {
        *q += 1;
    }
    let total_fg = ((batch_size as f64 * fg_fraction).round() as usize).min(batch_size);
    let mut fg_quota = vec![0usize; k];
    let mut assigned = 0usize;
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(k);
    for i in 0..k {
        let ideal = total_fg as f64 * quota[i] as f64 / batch_size as f64;
        let base = (ideal.floor() as usize).min(quota[i]);
        fg_quota[i] = base;
        assigned += base;
        remainders.push((i, ideal - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders {
        if assigned == total_fg {
            break;
        }
        if fg_quota[i] < quota[i] {
            fg_quota[i] += 1;
            assigned += 1;
        }
    }
    if assigned != total_fg {
        return Err(Error::invalid(
            "sample_batch",
            format!("cannot place {total_fg} foreground patches into {batch_size}"),
        ));
    }

    let mut samples = Vec::with_capacity(batch_size);
    let mut fallback = false;
    for (slot, &ci) in chosen.iter().enumerate() {
        let (volume, labels) = cases[ci];
        if quota[slot] == 0 {
            continue;
        }
        let mask = volume.brain_mask();
        let fg: Vec<bool> = labels.data.iter().map(|&c| c != 0).collect();
        let frac = fg_quota[slot] as f64 / quota[slot] as f64;
        let (centers, fell_back) =
            sample_centers(&mask, &fg, volume.extents(), quota[slot], frac, rng)?;
        fallback |= fell_back;
        for center in centers {
            samples.push(extract_patch(volume, labels, center, spec)?);
        }
    }
    assemble_patch_batch(&samples, max_subjects, fallback)
}

/// A whole-volume batch for the volumetric network.
#[derive(Clone, Debug)]
pub struct VolumeBatch {
    /// `[B, C, X, Y, Z]`
    pub inputs: Tensor<f32>,
    /// `[B, 1, X, Y, Z]`
    pub targets: Tensor<f32>,
    pub case_ids: Vec<String>,
}

impl VolumeBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_volume_batch(pairs: &[(&Volume, &LabelMap)]) -> Result<VolumeBatch> {
    if pairs.is_empty() {
        return Err(Error::invalid("assemble_batch", "no volumes"));
    }
    for (v, l) in pairs {
        if l.coding != Coding::Binary {
            return Err(Error::invalid("assemble_batch", "labels must be binary; remap first"));
        }
        if l.extents != v.extents() {
            return Err(Error::invalid(
                "assemble_batch",
                format!("label extents {:?} vs image {:?}", l.extents, v.extents()),
            ));
        }
    }
    let inputs = stack(pairs.iter().map(|(v, _)| &v.data).collect::<Vec<_>>())?;
    let targets_each: Vec<Tensor<f32>> = pairs
        .iter()
        .map(|(_, l)| {
            let [x, y, z] = l.extents;
            Tensor::new(&[1, x, y, z], l.data.iter().map(|&c| c as f32).collect())
        })
        .collect::<Result<_>>()?;
    let targets = stack(targets_each.iter().collect())?;
    Ok(VolumeBatch {
        inputs,
        targets,
        case_ids: pairs.iter().map(|(v, _)| v.case_id.clone()).collect(),
    })
}
