//! Training-time augmentation: per-axis reflections, optional affine
//! jitter, and per-channel intensity perturbation. All randomness is keyed
//! by (seed, case id, epoch), so a case augments identically no matter
//! which worker processes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

use super::{stable_hash, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Reflection enabled per spatial axis; each fires with p = 0.5.
    pub flip_axes: [bool; 3],
    /// Additive intensity shift, drawn per channel from N(0, this²).
    pub intensity_shift_std: f64,
    /// Multiplicative scale c, drawn per channel from N(0, this²); the
    /// transform is x(1+c) + shift, nonzero voxels only.
    pub intensity_scale_std: f64,
    /// Enable the affine jitter block below (each part fires with p = 0.5).
    pub spatial_jitter: bool,
    /// In-plane rotation bound, degrees, uniform in ±this.
    pub rotation_deg: f64,
    /// Isotropic scale bounds.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation bound, voxels, uniform in ±this per axis.
    pub translate_vox: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_axes: [true; 3],
            intensity_shift_std: 0.05,
            intensity_scale_std: 0.01,
            spatial_jitter: false,
            rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            translate_vox: 5.0,
        }
    }
}

impl AugmentConfig {
    /// True when no part of the pipeline can alter its input, letting
    /// training skip the copy entirely.
    pub fn is_identity(&self) -> bool {
        self.flip_axes == [false; 3]
            && self.intensity_shift_std == 0.0
            && self.intensity_scale_std == 0.0
            && !self.spatial_jitter
    }

    /// Configuration under which augment is the identity map.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_axes: [false; 3],
            intensity_shift_std: 0.0,
            intensity_scale_std: 0.0,
            spatial_jitter: false,
            ..Default::default()
        }
    }
}

fn keyed_rng(seed: u64, case_id: &str, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(case_id) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        rng.sample::<f64, _>(StandardNormal) * std
    }
}

/// Augment an image/label pair. Reflections and spatial jitter act on both
/// jointly; intensity perturbation acts on the image's nonzero voxels.
pub fn augment(
    volume: &Volume,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Result<(Volume, LabelMap)> {
    let mut rng = keyed_rng(seed, &volume.case_id, epoch);
    let ext = volume.extents();
    let c = volume.channels();
    let v = ext[0] * ext[1] * ext[2];

    let mut image: Vec<f32> = volume.data.data().to_vec();
    let mut codes: Vec<u8> = labels.data.clone();

    // reflections
    let mut flips = [false; 3];
    for axis in 0..3 {
        if cfg.flip_axes[axis] {
            flips[axis] = rng.gen_bool(0.5);
        }
    }
    if flips.iter().any(|&f| f) {
        for ch in 0..c {
            flip_grid(&mut image[ch * v..(ch + 1) * v], ext, flips);
        }
        flip_grid(&mut codes, ext, flips);
    }

    // affine jitter
    if cfg.spatial_jitter {
        let rotate = rng.gen_bool(0.5);
        let theta = rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
        let scale_on = rng.gen_bool(0.5);
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let translate = rng.gen_bool(0.5);
        let t = [
            rng.gen_range(-cfg.translate_vox..=cfg.translate_vox),
            rng.gen_range(-cfg.translate_vox..=cfg.translate_vox),
            rng.gen_range(-cfg.translate_vox..=cfg.translate_vox),
        ];
        let theta = if rotate { theta } else { 0.0 };
        let scale = if scale_on { scale } else { 1.0 };
        let t = if translate { t } else { [0.0; 3] };
        if rotate || scale_on || translate {
            let mapped = resample(&image, &codes, ext, c, theta, scale, t);
            image = mapped.0;
            codes = mapped.1;
        }
    }

    // intensity, per channel, nonzero voxels only
    for ch in 0..c {
        let shift = normal(&mut rng, cfg.intensity_shift_std);
        let scale = normal(&mut rng, cfg.intensity_scale_std);
        if shift != 0.0 || scale != 0.0 {
            for s in &mut image[ch * v..(ch + 1) * v] {
                if *s != 0.0 {
                    *s = (*s as f64 * (1.0 + scale) + shift) as f32;
                }
            }
        }
    }

    let out_volume = Volume {
        data: Tensor::new(&[c, ext[0], ext[1], ext[2]], image)?,
        spacing_mm: volume.spacing_mm,
        channel_names: volume.channel_names.clone(),
        case_id: volume.case_id.clone(),
    };
    let out_labels = LabelMap::new(ext, codes, labels.coding)?;
    Ok((out_volume, out_labels))
}

fn flip_grid<T: Copy>(grid: &mut [T], ext: [usize; 3], flips: [bool; 3]) {
    let [ex, ey, ez] = ext;
    let src = grid.to_vec();
    for x in 0..ex {
        let sx = if flips[0] { ex - 1 - x } else { x };
        for y in 0..ey {
            let sy = if flips[1] { ey - 1 - y } else { y };
            for z in 0..ez {
                let sz = if flips[2] { ez - 1 - z } else { z };
                grid[(x * ey + y) * ez + z] = src[(sx * ey + sy) * ez + sz];
            }
        }
    }
}

/// Pull both grids through the inverse affine: rotation about the z axis by
/// `theta`, isotropic `scale`, translation `t`, all about the volume
/// center. Image channels sample trilinearly, labels nearest-neighbour;
/// reads outside the volume produce background.
fn resample(
    image: &[f32],
    codes: &[u8],
    ext: [usize; 3],
    c: usize,
    theta: f64,
    scale: f64,
    t: [f64; 3],
) -> (Vec<f32>, Vec<u8>) {
    let [ex, ey, ez] = ext;
    let v = ex * ey * ez;
    let center = [
        (ex as f64 - 1.0) / 2.0,
        (ey as f64 - 1.0) / 2.0,
        (ez as f64 - 1.0) / 2.0,
    ];
    let (sin, cos) = (-theta).sin_cos();
    let inv_scale = 1.0 / scale;

    let mut out_image = vec![0.0f32; c * v];
    let mut out_codes = vec![0u8; v];
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                let px = x as f64 - center[0] - t[0];
                let py = y as f64 - center[1] - t[1];
                let pz = z as f64 - center[2] - t[2];
                let qx = (px * cos - py * sin) * inv_scale + center[0];
                let qy = (px * sin + py * cos) * inv_scale + center[1];
                let qz = pz * inv_scale + center[2];
                let di = (x * ey + y) * ez + z;
                for ch in 0..c {
                    out_image[ch * v + di] =
                        trilinear(&image[ch * v..(ch + 1) * v], ext, qx, qy, qz);
                }
                out_codes[di] = nearest(codes, ext, qx, qy, qz);
            }
        }
    }
    (out_image, out_codes)
}

fn trilinear(grid: &[f32], ext: [usize; 3], x: f64, y: f64, z: f64) -> f32 {
    let [ex, ey, ez] = ext;
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fz = z - z0;
    let mut acc = 0.0f64;
    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
        let xi = x0 as i64 + dx;
        if wx == 0.0 || xi < 0 || xi >= ex as i64 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            let yi = y0 as i64 + dy;
            if wy == 0.0 || yi < 0 || yi >= ey as i64 {
                continue;
            }
            for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
                let zi = z0 as i64 + dz;
                if wz == 0.0 || zi < 0 || zi >= ez as i64 {
                    continue;
                }
                let s = grid[((xi as usize) * ey + yi as usize) * ez + zi as usize];
                acc += s as f64 * wx * wy * wz;
            }
        }
    }
    acc as f32
}

fn nearest(codes: &[u8], ext: [usize; 3], x: f64, y: f64, z: f64) -> u8 {
    let [ex, ey, ez] = ext;
    let xi = x.round() as i64;
    let yi = y.round() as i64;
    let zi = z.round() as i64;
    if xi < 0 || yi < 0 || zi < 0 || xi >= ex as i64 || yi >= ey as i64 || zi >= ez as i64 {
        return 0;
    }
    codes[((xi as usize) * ey + yi as usize) * ez + zi as usize]
}
