//! Synthetic phantom corpus: ellipsoidal "brains" with textured tissue,
//! one or two ellipsoidal lesions (edema shell around a classed core), and
//! per-channel contrast chosen so each channel carries the information its
//! real counterpart would. Desk-scale stand-in for scan data that cannot
//! ship with the code.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{write_labels, write_volume, CaseEntry, Coding, DomainTag, LabelMap, Manifest, Volume};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Cubic volume edge, voxels. Multiples of 27 keep the volumetric
    /// network's pooling ladder exact.
    pub extent: usize,
    pub channels: Vec<String>,
    /// Lesion size bounds as a fraction of brain voxels.
    pub lesion_fraction_min: f64,
    pub lesion_fraction_max: f64,
    pub noise_std: f64,
    /// Emit a second, independently perturbed delineation per case.
    pub two_raters: bool,
    /// Remap the intensity profile (gain, gamma, offset, extra noise) to
    /// mimic a different acquisition site.
    pub domain_shift: bool,
    pub tag: DomainTag,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 20,
            extent: 54,
            channels: vec!["t1w".into(), "t1ce".into(), "t2w".into(), "flair".into()],
            lesion_fraction_min: 0.01,
            lesion_fraction_max: 0.10,
            noise_std: 0.03,
            two_raters: false,
            domain_shift: false,
            tag: DomainTag::Source,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::invalid("synth", "n_cases must be at least 1"));
        }
        if self.extent == 0 || self.extent % 27 != 0 {
            return Err(Error::invalid(
                "synth",
                format!("extent {} must be a positive multiple of 27", self.extent),
            ));
        }
        if self.channels.is_empty() {
            return Err(Error::invalid("synth", "channel list empty"));
        }
        if !(0.0 < self.lesion_fraction_min
            && self.lesion_fraction_min < self.lesion_fraction_max
            && self.lesion_fraction_max < 1.0)
        {
            return Err(Error::invalid(
                "synth",
                format!(
                    "lesion fraction bounds ({}, {}) invalid",
                    self.lesion_fraction_min, self.lesion_fraction_max
                ),
            ));
        }
        Ok(())
    }
}

struct Lesion {
    center: [f64; 3],
    axes: [f64; 3],
    /// Core radius as a fraction of the lesion radius.
    rho: f64,
}

/// Generate one case purely in memory. Deterministic in (seed, index, cfg).
pub fn synth_case(
    seed: u64,
    index: usize,
    cfg: &SynthConfig,
) -> Result<(Volume, LabelMap, Option<LabelMap>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7068_616e_746f_6d00 ^ index as u64);

    let e = cfg.extent;
    let ef = e as f64;
    let nvox = e * e * e;
    let nch = cfg.channels.len();

    // brain ellipsoid
    let brain_center: [f64; 3] = std::array::from_fn(|_| (ef - 1.0) / 2.0 + rng.gen_range(-1.5..=1.5));
    let brain_axes: [f64; 3] = std::array::from_fn(|_| ef * rng.gen_range(0.38..=0.44));

    // per-channel base intensity and smooth texture modes
    let mut bases = Vec::with_capacity(nch);
    let mut modes: Vec<[(f64, [f64; 3], f64); 3]> = Vec::with_capacity(nch);
    for name in &cfg.channels {
        let base = match name.as_str() {
            "t1w" => 0.80,
            "t1ce" => 0.75,
            "t2w" => 0.60,
            "flair" => 0.70,
            _ => 0.70,
        } + rng.gen_range(-0.03..=0.03);
        bases.push(base);
        modes.push(std::array::from_fn(|_| {
            let amp = rng.gen_range(0.02..=0.05);
            let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..=1.5) * 2.0 * PI / ef);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (amp, freq, phase)
        }));
    }

    let brain: Vec<bool> = (0..nvox)
        .map(|i| ellipsoid_coord(unflatten(i, e), brain_center, brain_axes) <= 1.0)
        .collect();
    let brain_count = brain.iter().filter(|&&b| b).count();

    // lesions: one or two, with a total voxel budget
    let n_lesions = if rng.gen_bool(0.5) { 2 } else { 1 };
    let lo = cfg.lesion_fraction_min;
    let hi = cfg.lesion_fraction_max;
    let target_fraction = rng.gen_range((lo + 0.25 * (hi - lo))..=(lo + 0.75 * (hi - lo)));
    let share = if n_lesions == 2 {
        let w = rng.gen_range(0.35..=0.65);
        vec![w, 1.0 - w]
    } else {
        vec![1.0]
    };
    let mut lesions = Vec::with_capacity(n_lesions);
    for j in 0..n_lesions {
        let center = loop {
            let p: [f64; 3] = std::array::from_fn(|a| {
                brain_center[a] + rng.gen_range(-0.6..=0.6) * brain_axes[a]
            });
            if ellipsoid_coord(p, brain_center, brain_axes) <= 0.35 {
                break p;
            }
        };
        let shape: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..=1.25));
        let volume_target = share[j] * target_fraction * brain_count as f64;
        let r = (3.0 * volume_target / (4.0 * PI * shape[0] * shape[1] * shape[2])).cbrt();
        let axes = [r * shape[0], r * shape[1], r * shape[2]];
        let rho = rng.gen_range(0.50..=0.65);
        lesions.push(Lesion { center, axes, rho });
    }

    // fit the lesion fraction into bounds by scaling all radii
    let mut scale = 1.0f64;
    let mut labels = Vec::new();
    let mut ok = false;
    for _ in 0..8 {
        labels = paint_labels(e, &brain, &lesions, scale);
        let count = labels.iter().filter(|&&c| c != 0).count();
        let fraction = count as f64 / brain_count as f64;
        if fraction >= lo && fraction <= hi {
            ok = true;
            break;
        }
        let goal = (lo + hi) / 2.0;
        scale *= (goal / fraction.max(1e-9)).cbrt().clamp(0.5, 2.0);
    }
    if !ok {
        return Err(Error::invalid(
            "synth",
            format!("case {index}: lesion fraction did not converge into [{lo}, {hi}]"),
        ));
    }

    // The second rater re-delineates the same lesions with a boundary
    // threshold pushed meaningfully off the first rater's (scale kept away
    // from 1 so voxel quantization cannot collapse the two) plus a subvoxel
    // recentering.
    let labels_r2 = if cfg.two_raters {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let factor = 1.0 + sign * rng.gen_range(0.03..=0.10);
        let moved: Vec<Lesion> = lesions
            .iter()
            .map(|l| Lesion {
                center: std::array::from_fn(|a| l.center[a] + rng.gen_range(-0.75..=0.75)),
                axes: l.axes,
                rho: l.rho,
            })
            .collect();
        Some(paint_labels(e, &brain, &moved, scale * factor))
    } else {
        None
    };

    // per-channel acquisition remap parameters for the shifted domain
    let domain: Vec<(f64, f64, f64)> = if cfg.domain_shift {
        (0..nch)
            .map(|ch| {
                let gamma = [1.30, 0.80, 1.25, 0.75][ch % 4] * rng.gen_range(0.95..=1.05);
                let gain = [0.75, 1.20, 0.80, 1.15][ch % 4];
                let offset = [0.18, -0.05, 0.12, 0.05][ch % 4];
                (gamma, gain, offset)
            })
            .collect()
    } else {
        Vec::new()
    };
    let noise_std = if cfg.domain_shift {
        cfg.noise_std * 1.5
    } else {
        cfg.noise_std
    };

    // intensities: base + texture + class contrast, then noise, brain only
    let mut image = vec![0.0f32; nch * nvox];
    for ch in 0..nch {
        let name = cfg.channels[ch].as_str();
        let plane = &mut image[ch * nvox..(ch + 1) * nvox];
        for i in 0..nvox {
            if !brain[i] {
                continue;
            }
            let p = unflatten(i, e);
            let mut val = bases[ch];
            for (amp, freq, phase) in &modes[ch] {
                val += amp
                    * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).cos();
            }
            val += class_contrast(name, labels[i]);
            if !domain.is_empty() {
                let (gamma, gain, offset) = domain[ch];
                val = gain * val.max(0.02).powf(gamma) + offset;
            }
            plane[i] = val as f32;
        }
        for (i, v) in plane.iter_mut().enumerate() {
            if brain[i] {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
                *v = (*v as f64 + noise).max(0.02) as f32;
            }
        }
    }

    let id = format!("case{index:03}");
    let volume = Volume {
        data: Tensor::new(&[nch, e, e, e], image)?,
        spacing_mm: [1.0; 3],
        channel_names: cfg.channels.clone(),
        case_id: id,
    };
    let labels = LabelMap::new([e, e, e], labels, Coding::Raw)?;
    let labels_r2 = labels_r2
        .map(|l| LabelMap::new([e, e, e], l, Coding::Raw))
        .transpose()?;
    Ok((volume, labels, labels_r2))
}

/// Generate a corpus on disk: one file per channel per case, label files,
/// and a manifest tying them together.
pub fn synth_generate(out_dir: &Path, seed: u64, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for index in 0..cfg.n_cases {
        let (volume, labels, labels_r2) = synth_case(seed, index, cfg)?;
        let id = volume.case_id.clone();
        let mut volumes = BTreeMap::new();
        let [x, y, z] = volume.extents();
        let nvox = x * y * z;
        for (ch, name) in cfg.channels.iter().enumerate() {
            let rel = format!("{id}_{name}.vvol");
            let single = Volume {
                data: Tensor::new(
                    &[1, x, y, z],
                    volume.data.data()[ch * nvox..(ch + 1) * nvox].to_vec(),
                )?,
                spacing_mm: volume.spacing_mm,
                channel_names: vec![name.clone()],
                case_id: id.clone(),
            };
            write_volume(&single, &out_dir.join(&rel))?;
            volumes.insert(name.clone(), rel.into());
        }
        let labels_rel = format!("{id}_labels.vvol");
        write_labels(&labels, &out_dir.join(&labels_rel))?;
        let labels_r2_rel = match &labels_r2 {
            Some(l) => {
                let rel = format!("{id}_labels_r2.vvol");
                write_labels(l, &out_dir.join(&rel))?;
                Some(rel.into())
            }
            None => None,
        };
        cases.push(CaseEntry {
            id,
            volumes,
            labels: labels_rel.into(),
            labels_r2: labels_r2_rel,
            tag: cfg.tag,
        });
    }
    let manifest = Manifest {
        cases,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn unflatten(i: usize, e: usize) -> [f64; 3] {
    [
        (i / (e * e)) as f64,
        ((i / e) % e) as f64,
        (i % e) as f64,
    ]
}

/// Squared normalized ellipsoid coordinate: <= 1 inside.
fn ellipsoid_coord(p: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| ((p[a] - center[a]) / axes[a]).powi(2))
        .sum()
}

/// Rasterize the class map: edema shell (2) around a concentric core split
/// radially into necrotic (1), non-enhancing (3), and an enhancing rim (4).
/// Lesions are clipped to the brain; later lesions overwrite earlier ones.
fn paint_labels(e: usize, brain: &[bool], lesions: &[Lesion], scale: f64) -> Vec<u8> {
    let nvox = e * e * e;
    let mut labels = vec![0u8; nvox];
    for lesion in lesions {
        let axes = [
            lesion.axes[0] * scale,
            lesion.axes[1] * scale,
            lesion.axes[2] * scale,
        ];
        let core_axes = [axes[0] * lesion.rho, axes[1] * lesion.rho, axes[2] * lesion.rho];
        for i in 0..nvox {
            if !brain[i] {
                continue;
            }
            let p = unflatten(i, e);
            if ellipsoid_coord(p, lesion.center, axes) > 1.0 {
                continue;
            }
            let ec = ellipsoid_coord(p, lesion.center, core_axes);
            labels[i] = if ec > 1.0 {
                2
            } else {
                let r = ec.sqrt();
                if r <= 0.55 {
                    1
                } else if r <= 0.85 {
                    3
                } else {
                    4
                }
            };
        }
    }
    labels
}

/// Additive contrast of each tissue class on each channel. The edema and
/// core light up the fluid-sensitive channels; the enhancing rim lights up
/// the contrast channel, whose necrotic center goes dark instead.
fn class_contrast(channel: &str, class: u8) -> f64 {
    match channel {
        "t1w" => match class {
            1 => -0.15,
            2 | 3 | 4 => -0.10,
            _ => 0.0,
        },
        "t1ce" => match class {
            1 => -0.15,
            2 => 0.02,
            3 => 0.20,
            4 => 0.40,
            _ => 0.0,
        },
        "t2w" => match class {
            2 => 0.30,
            1 | 3 | 4 => 0.35,
            _ => 0.0,
        },
        _ => match class {
            2 => 0.35,
            1 | 3 | 4 => 0.30,
            _ => 0.0,
        },
    }
}
