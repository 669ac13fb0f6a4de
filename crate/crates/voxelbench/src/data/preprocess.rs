//! Fixed-box cropping, per-channel intensity normalization over nonzero
//! voxels, and task-specific label remapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Coding, LabelMap, Volume};

/// Fixed crop box. The default extent matches the template-space brain
/// bounding box used throughout; offsets place it within a 240x240x155
/// grid and are configurable because template registration varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropBox {
    pub offset: [usize; 3],
    pub extent: [usize; 3],
}

impl Default for CropBox {
    fn default() -> Self {
        CropBox {
            offset: [48, 22, 5],
            extent: [143, 196, 144],
        }
    }
}

impl CropBox {
    fn check(&self, input: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.offset[axis] + self.extent[axis] > input[axis] {
                return Err(Error::invalid(
                    "crop_bbox",
                    format!(
                        "axis {}: box {}+{} exceeds input extent {}",
                        ["x", "y", "z"][axis],
                        self.offset[axis],
                        self.extent[axis],
                        input[axis]
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn crop_grid<T: Copy>(
    src: &[T],
    input: [usize; 3],
    bbox: &CropBox,
    dst: &mut Vec<T>,
) {
    let [ox, oy, oz] = bbox.offset;
    let [ex, ey, ez] = bbox.extent;
    for x in 0..ex {
        for y in 0..ey {
            let row = ((x + ox) * input[1] + y + oy) * input[2] + oz;
            dst.extend_from_slice(&src[row..row + ez]);
        }
    }
}

pub fn crop_volume(volume: &Volume, bbox: &CropBox) -> Result<Volume> {
    let input = volume.extents();
    bbox.check(input)?;
    let c = volume.channels();
    let v = input[0] * input[1] * input[2];
    let mut data = Vec::with_capacity(c * bbox.extent.iter().product::<usize>());
    for ch in 0..c {
        crop_grid(&volume.data.data()[ch * v..(ch + 1) * v], input, bbox, &mut data);
    }
    Ok(Volume {
        data: Tensor::new(
            &[c, bbox.extent[0], bbox.extent[1], bbox.extent[2]],
            data,
        )?,
        spacing_mm: volume.spacing_mm,
        channel_names: volume.channel_names.clone(),
        case_id: volume.case_id.clone(),
    })
}

pub fn crop_labels(labels: &LabelMap, bbox: &CropBox) -> Result<LabelMap> {
    bbox.check(labels.extents)?;
    let mut data = Vec::with_capacity(bbox.extent.iter().product());
    crop_grid(&labels.data, labels.extents, bbox, &mut data);
    LabelMap::new(bbox.extent, data, labels.coding)
}

/// Undo a crop by zero-padding back to the original extents; in-box voxels
/// are preserved exactly.
pub fn uncrop_zero_pad(volume: &Volume, bbox: &CropBox, full: [usize; 3]) -> Result<Volume> {
    bbox.check(full)?;
    if volume.extents() != bbox.extent {
        return Err(Error::invalid(
            "uncrop",
            format!(
                "volume extents {:?} do not match box extent {:?}",
                volume.extents(),
                bbox.extent
            ),
        ));
    }
    let c = volume.channels();
    let [ex, ey, ez] = bbox.extent;
    let [ox, oy, oz] = bbox.offset;
    let vin = ex * ey * ez;
    let vout = full[0] * full[1] * full[2];
    let src = volume.data.data();
    let mut data = vec![0.0f32; c * vout];
    for ch in 0..c {
        for x in 0..ex {
            for y in 0..ey {
                let s = ch * vin + (x * ey + y) * ez;
                let d = ch * vout + ((x + ox) * full[1] + y + oy) * full[2] + oz;
                data[d..d + ez].copy_from_slice(&src[s..s + ez]);
            }
        }
    }
    Ok(Volume {
        data: Tensor::new(&[c, full[0], full[1], full[2]], data)?,
        spacing_mm: volume.spacing_mm,
        channel_names: volume.channel_names.clone(),
        case_id: volume.case_id.clone(),
    })
}

/// Intensity normalization variants. Statistics are computed per channel
/// over nonzero voxels only, and exact zeros stay zero (skull-stripped
/// background convention).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    ZscoreNonzero,
    Minmax,
    /// the default used for final evaluations
    #[default]
    P95,
}

impl NormMode {
    pub fn label(self) -> &'static str {
        match self {
            NormMode::ZscoreNonzero => "zscore_nonzero",
            NormMode::Minmax => "minmax",
            NormMode::P95 => "p95",
        }
    }
}

pub fn normalize_intensity(volume: &Volume, mode: NormMode) -> Result<Volume> {
    let c = volume.channels();
    let [x, y, z] = volume.extents();
    let v = x * y * z;
    let mut out = volume.data.clone();
    for ch in 0..c {
        let name = &volume.channel_names[ch];
        let plane = &mut out.data_mut()[ch * v..(ch + 1) * v];
        let nonzero: Vec<f32> = plane.iter().copied().filter(|&s| s != 0.0).collect();
        if nonzero.is_empty() {
            return Err(Error::invalid(
                "normalize",
                format!("channel {name}: no nonzero voxels"),
            ));
        }
        match mode {
            NormMode::ZscoreNonzero => {
                let n = nonzero.len() as f64;
                let mean = nonzero.iter().map(|&s| s as f64).sum::<f64>() / n;
                let var = nonzero
                    .iter()
                    .map(|&s| (s as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let std = var.sqrt();
                if std == 0.0 {
                    return Err(Error::invalid(
                        "normalize",
                        format!("channel {name}: zero standard deviation"),
                    ));
                }
                for s in plane.iter_mut() {
                    if *s != 0.0 {
                        *s = ((*s as f64 - mean) / std) as f32;
                    }
                }
            }
            NormMode::Minmax => {
                let min = nonzero.iter().copied().fold(f32::INFINITY, f32::min);
                let max = nonzero.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if max == min {
                    return Err(Error::invalid(
                        "normalize",
                        format!("channel {name}: constant nonzero intensity"),
                    ));
                }
                let span = (max - min) as f64;
                for s in plane.iter_mut() {
                    if *s != 0.0 {
                        *s = ((*s - min) as f64 / span) as f32;
                    }
                }
            }
            NormMode::P95 => {
                let p = percentile_95(&nonzero);
                if p == 0.0 {
                    return Err(Error::invalid(
                        "normalize",
                        format!("channel {name}: zero 95th percentile"),
                    ));
                }
                for s in plane.iter_mut() {
                    if *s != 0.0 {
                        *s = (*s as f64 / p as f64) as f32;
                    }
                }
            }
        }
    }
    Ok(Volume {
        data: out,
        spacing_mm: volume.spacing_mm,
        channel_names: volume.channel_names.clone(),
        case_id: volume.case_id.clone(),
    })
}

/// Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest value.
fn percentile_95(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Segmentation task: which raw classes count as foreground.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// All tumoral tissue: edema, enhancing, non-enhancing, necrotic core.
    WholeTumor,
    /// Core only: enhancing, non-enhancing, necrotic; edema excluded.
    TumorCore,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::WholeTumor => "whole_tumor",
            Task::TumorCore => "tumor_core",
        }
    }

    pub fn foreground(self, code: u8) -> bool {
        match self {
            Task::WholeTumor => matches!(code, 1 | 2 | 3 | 4),
            Task::TumorCore => matches!(code, 1 | 3 | 4),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole_tumor" => Ok(Task::WholeTumor),
            "tumor_core" => Ok(Task::TumorCore),
            other => Err(Error::invalid(
                "task",
                format!("unknown task {other:?} (whole_tumor or tumor_core)"),
            )),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub fn remap_labels(labels: &LabelMap, task: Task) -> Result<LabelMap> {
    // A map already in binary coding is taken as this task's output, so
    // remapping is idempotent.
    if labels.coding == Coding::Binary {
        return Ok(labels.clone());
    }
    let mut data = Vec::with_capacity(labels.data.len());
    for &code in &labels.data {
        if code > 4 {
            return Err(Error::invalid(
                "remap_labels",
                format!("unknown class code {code}"),
            ));
        }
        data.push(task.foreground(code) as u8);
    }
    LabelMap::new(labels.extents, data, Coding::Binary)
}
