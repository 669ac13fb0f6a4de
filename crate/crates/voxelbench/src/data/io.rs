//! Volume file I/O. The native container is a trivial header-plus-floats
//! format; alongside it sits a minimal reader for the common uncompressed
//! single-file medical imaging format so real scans can be pulled in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Coding, LabelMap, Volume};

const MAGIC: &[u8; 6] = b"VVOL1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    dtype: String,
    spacing_mm: [f64; 3],
    channel_names: Vec<String>,
}

/// Write a volume to the native container: magic, 8-byte little-endian
/// header length, structured-text header, then raw little-endian 32-bit
/// floats in C order.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let s = volume.data.shape();
    let header = Header {
        shape: [s[0], s[1], s[2], s[3]],
        dtype: "f32".into(),
        spacing_mm: volume.spacing_mm,
        channel_names: volume.channel_names.clone(),
    };
    let htext = serde_json::to_string(&header)
        .map_err(|e| Error::format(path, format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(6 + 8 + htext.len() + 4 * volume.data.numel());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(htext.len() as u64).to_le_bytes());
    bytes.extend_from_slice(htext.as_bytes());
    for v in volume.data.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a volume from disk, dispatching on content: the native container by
/// its magic, otherwise the medical format by its header layout.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] == MAGIC {
        return read_native(path, &bytes);
    }
    if looks_medical(&bytes) {
        return read_medical(path, &bytes);
    }
    Err(Error::format(
        path,
        "unrecognized volume file (bad magic)".to_string(),
    ))
}

fn read_native(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let mut at = MAGIC.len();
    if bytes.len() < at + 8 {
        return Err(Error::format(
            path,
            format!("truncated: expected at least {} bytes, got {}", at + 8, bytes.len()),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    at += 8;
    if bytes.len() < at + hlen {
        return Err(Error::format(
            path,
            format!("truncated header: expected {} bytes, got {}", at + hlen, bytes.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[at..at + hlen])
        .map_err(|e| Error::format(path, format!("header parse: {e}")))?;
    at += hlen;
    if header.dtype != "f32" {
        return Err(Error::format(
            path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let numel: usize = header.shape.iter().product();
    let expected = at + 4 * numel;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {} bytes, got {}", expected, bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if header.channel_names.len() != header.shape[0] {
        return Err(Error::format(
            path,
            format!(
                "{} channel names for {} channels",
                header.channel_names.len(),
                header.shape[0]
            ),
        ));
    }
    Ok(Volume {
        data: Tensor::new(&header.shape, data)?,
        spacing_mm: header.spacing_mm,
        channel_names: header.channel_names,
        case_id: stem(path),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into())
}

// Medical-format constants: 348-byte header, fields at fixed offsets.
const HDR_LEN: usize = 348;

fn looks_medical(bytes: &[u8]) -> bool {
    bytes.len() >= HDR_LEN && (&bytes[344..348] == b"n+1\0" || &bytes[344..348] == b"ni1\0")
}

struct Fields {
    swap: bool,
}

impl Fields {
    fn i16(&self, bytes: &[u8], off: usize) -> i16 {
        let raw: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
        if self.swap {
            i16::from_be_bytes(raw)
        } else {
            i16::from_le_bytes(raw)
        }
    }

    fn f32(&self, bytes: &[u8], off: usize) -> f32 {
        let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if self.swap {
            f32::from_be_bytes(raw)
        } else {
            f32::from_le_bytes(raw)
        }
    }
}

fn read_medical(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..348] == b"ni1\0" {
        return Err(Error::format(
            path,
            "two-file form (separate image file) unsupported".to_string(),
        ));
    }
    // Byte order: dim[0] holds the dimensionality, always 1..=7, so a value
    // outside that range means the file uses the other byte order.
    let dim0_le = i16::from_le_bytes(bytes[40..42].try_into().unwrap());
    let f = if (1..=7).contains(&dim0_le) {
        Fields { swap: false }
    } else {
        let dim0_be = i16::from_be_bytes(bytes[40..42].try_into().unwrap());
        if (1..=7).contains(&dim0_be) {
            Fields { swap: true }
        } else {
            return Err(Error::format(
                path,
                format!("dimension count {dim0_le} invalid in either byte order"),
            ));
        }
    };

    let ndim = f.i16(bytes, 40) as usize;
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = f.i16(bytes, 42 + 2 * i);
        if v < 1 {
            return Err(Error::format(path, format!("axis {} extent {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(
            path,
            format!("only 3-D images supported, got dims {dims:?}"),
        ));
    }
    let [x, y, z] = [dims[0], dims[1], dims[2]];

    let datatype = f.i16(bytes, 70);
    let elem = match datatype {
        2 => 1,  // unsigned 8-bit
        4 => 2,  // signed 16-bit
        16 => 4, // 32-bit float
        other => {
            return Err(Error::format(
                path,
                format!("unsupported datatype code {other}"),
            ))
        }
    };

    let vox_offset = f.f32(bytes, 108);
    if !vox_offset.is_finite() || vox_offset < HDR_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("bad data offset {vox_offset}")));
    }
    let off = vox_offset as usize;
    let n = x * y * z;
    let expected = off + n * elem;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: expected {} bytes, got {}", expected, bytes.len()),
        ));
    }

    let mut slope = f.f32(bytes, 112);
    let inter = f.f32(bytes, 116);
    if slope == 0.0 {
        slope = 1.0;
    }

    let raw = &bytes[off..expected];
    let data: Vec<f32> = match datatype {
        2 => raw.iter().map(|&b| b as f32 * slope + inter).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| {
                let raw: [u8; 2] = c.try_into().unwrap();
                let v = if f.swap {
                    i16::from_be_bytes(raw)
                } else {
                    i16::from_le_bytes(raw)
                };
                v as f32 * slope + inter
            })
            .collect(),
        16 => raw
            .chunks_exact(4)
            .map(|c| {
                let raw: [u8; 4] = c.try_into().unwrap();
                let v = if f.swap {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                };
                v * slope + inter
            })
            .collect(),
        _ => unreachable!(),
    };

    let mut spacing = [1.0f64; 3];
    for (i, sp) in spacing.iter_mut().enumerate() {
        let p = f.f32(bytes, 76 + 4 * (i + 1)) as f64;
        if p.is_finite() && p > 0.0 {
            *sp = p;
        }
    }

    Ok(Volume {
        data: Tensor::new(&[1, x, y, z], data)?,
        spacing_mm: spacing,
        channel_names: vec!["image".into()],
        case_id: stem(path),
    })
}

const LABELS_RAW: &str = "labels_raw";
const LABELS_BINARY: &str = "labels_binary";

/// Store a label map in the native container as a single channel whose name
/// records the coding.
pub fn write_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let name = match labels.coding {
        Coding::Raw => LABELS_RAW,
        Coding::Binary => LABELS_BINARY,
    };
    let [x, y, z] = labels.extents;
    let data: Vec<f32> = labels.data.iter().map(|&c| c as f32).collect();
    let volume = Volume {
        data: Tensor::new(&[1, x, y, z], data)?,
        spacing_mm: [1.0; 3],
        channel_names: vec![name.into()],
        case_id: stem(path),
    };
    write_volume(&volume, path)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let v = read_volume(path)?;
    if v.channels() != 1 {
        return Err(Error::format(
            path,
            format!("label map must have one channel, got {}", v.channels()),
        ));
    }
    let coding = match v.channel_names[0].as_str() {
        LABELS_RAW => Coding::Raw,
        LABELS_BINARY => Coding::Binary,
        other => {
            return Err(Error::format(
                path,
                format!("channel {other:?} is not a label coding"),
            ))
        }
    };
    let mut codes = Vec::with_capacity(v.data.numel());
    for &f in v.data.data() {
        if f.fract() != 0.0 || !(0.0..=255.0).contains(&f) {
            return Err(Error::format(path, format!("non-integer class code {f}")));
        }
        codes.push(f as u8);
    }
    LabelMap::new(v.extents(), codes, coding).map_err(|e| match e {
        Error::Invalid { msg, .. } => Error::format(path, msg),
        other => other,
    })
}
