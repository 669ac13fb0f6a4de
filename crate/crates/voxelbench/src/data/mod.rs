//! Volumes, label maps, dataset manifests, and everything that turns files
//! on disk into network-ready arrays: I/O, cropping, normalization, label
//! remapping, augmentation, and synthetic corpus generation.

mod augment;
mod io;
mod preprocess;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use io::{read_labels, read_volume, write_labels, write_volume};
pub use preprocess::{
    crop_labels, crop_volume, normalize_intensity, remap_labels, uncrop_zero_pad, CropBox,
    NormMode, Task,
};
pub use synth::{synth_case, synth_generate, SynthConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-channel image volume, `[C,X,Y,Z]` 32-bit floats.
#[derive(Clone, Debug)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing_mm: [f64; 3],
    pub channel_names: Vec<String>,
    pub case_id: String,
}

impl Volume {
    pub fn extents(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// View as a single-item batch `[1,C,X,Y,Z]`. No copy.
    pub fn as_batch(&self) -> Tensor<f32> {
        let s = self.data.shape();
        self.data.reshape(&[1, s[0], s[1], s[2], s[3]]).unwrap()
    }

    /// Voxels where any channel is nonzero; the sampling domain.
    pub fn brain_mask(&self) -> Vec<bool> {
        let [c, x, y, z] = [
            self.data.shape()[0],
            self.data.shape()[1],
            self.data.shape()[2],
            self.data.shape()[3],
        ];
        let v = x * y * z;
        let src = self.data.data();
        let mut mask = vec![false; v];
        for ch in 0..c {
            let plane = &src[ch * v..(ch + 1) * v];
            for (m, &s) in mask.iter_mut().zip(plane) {
                *m |= s != 0.0;
            }
        }
        mask
    }
}

/// Integer class codes over a voxel grid.
///
/// Raw coding is the five-class clinical scheme: 0 background, 1 necrotic
/// core, 2 edema, 3 non-enhancing tumor, 4 enhancing tumor. Binary coding
/// is 0/1 after task remapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    Raw,
    Binary,
}

impl Coding {
    pub fn allows(self, code: u8) -> bool {
        match self {
            Coding::Raw => code <= 4,
            Coding::Binary => code <= 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabelMap {
    pub data: Vec<u8>,
    pub extents: [usize; 3],
    pub coding: Coding,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], data: Vec<u8>, coding: Coding) -> Result<Self> {
        let n = extents[0] * extents[1] * extents[2];
        if data.len() != n {
            return Err(Error::invalid(
                "labelmap",
                format!("{} voxels for extents {:?}", data.len(), extents),
            ));
        }
        if let Some(bad) = data.iter().find(|&&c| !coding.allows(c)) {
            return Err(Error::invalid(
                "labelmap",
                format!("class code {bad} outside {coding:?} alphabet"),
            ));
        }
        Ok(LabelMap {
            data,
            extents,
            coding,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Binary map as a float tensor `[1,1,X,Y,Z]` for loss computation.
    pub fn as_target<T: crate::tensor::Scalar>(&self) -> Result<Tensor<T>> {
        if self.coding != Coding::Binary {
            return Err(Error::invalid(
                "labelmap",
                "targets require binary coding; remap first",
            ));
        }
        let [x, y, z] = self.extents;
        let data = self
            .data
            .iter()
            .map(|&c| crate::tensor::s::<T>(c as f64))
            .collect();
        Tensor::new(&[1, 1, x, y, z], data)
    }
}

/// Split tag for transfer-learning experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// One dataset case: sequence name to volume path, plus labels. The second
/// rater's delineation is optional and only present on corpora that carry
/// one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub volumes: BTreeMap<String, PathBuf>,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_r2: Option<PathBuf>,
    pub tag: DomainTag,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
    /// Directory paths are relative to; set on load, not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("manifest parse: {e}")))?;
        m.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for case in &m.cases {
            for p in case
                .volumes
                .values()
                .chain(std::iter::once(&case.labels))
                .chain(case.labels_r2.iter())
            {
                let full = m.root.join(p);
                if !full.exists() {
                    return Err(Error::format(
                        path,
                        format!("case {}: missing file {}", case.id, full.display()),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, format!("manifest encode: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn case(&self, id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::invalid("manifest", format!("no case named {id}")))
    }

    /// Load a case's image channels in the requested sequence order, stacked
    /// into one volume, along with its labels (and the second rater's, when
    /// present).
    pub fn load_case(
        &self,
        entry: &CaseEntry,
        sequences: &[String],
    ) -> Result<(Volume, LabelMap, Option<LabelMap>)> {
        if sequences.is_empty() {
            return Err(Error::invalid("manifest", "empty sequence list"));
        }
        let mut parts: Vec<Volume> = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let rel = entry.volumes.get(seq).ok_or_else(|| {
                Error::invalid(
                    "manifest",
                    format!("case {}: no volume for sequence {seq}", entry.id),
                )
            })?;
            parts.push(read_volume(&self.root.join(rel))?);
        }
        let extents = parts[0].extents();
        let spacing = parts[0].spacing_mm;
        let mut data = Vec::new();
        for (seq, p) in sequences.iter().zip(&parts) {
            if p.extents() != extents {
                return Err(Error::invalid(
                    "manifest",
                    format!(
                        "case {}: sequence {seq} extents {:?} differ from {:?}",
                        entry.id,
                        p.extents(),
                        extents
                    ),
                ));
            }
            if p.channels() != 1 {
                return Err(Error::invalid(
                    "manifest",
                    format!("case {}: sequence {seq} has {} channels", entry.id, p.channels()),
                ));
            }
            data.extend_from_slice(p.data.data());
        }
        let volume = Volume {
            data: Tensor::new(
                &[sequences.len(), extents[0], extents[1], extents[2]],
                data,
            )?,
            spacing_mm: spacing,
            channel_names: sequences.to_vec(),
            case_id: entry.id.clone(),
        };
        let labels = read_labels(&self.root.join(&entry.labels))?;
        if labels.extents != extents {
            return Err(Error::invalid(
                "manifest",
                format!(
                    "case {}: label extents {:?} differ from image {:?}",
                    entry.id, labels.extents, extents
                ),
            ));
        }
        let labels_r2 = entry
            .labels_r2
            .as_ref()
            .map(|p| read_labels(&self.root.join(p)))
            .transpose()?;
        Ok((volume, labels, labels_r2))
    }
}

/// Stable 64-bit string hash (FNV-1a) for keyed per-case randomness.
/// The standard library hasher is not guaranteed stable across releases.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}
