//! On-disk formats.
//!
//! `.iqf` frame stack: magic `IQF1`, little-endian `u32` T, H, W, then
//! `T*H*W` interleaved `(re, im)` `f32` pairs, frame-major then row-major.
//!
//! `.lbl` label map: magic `LBL1`, little-endian `u32` H, W, K, then the
//! detect, xbin and zbin maps as `H*W` bytes each, row-major.
//!
//! Point sets are JSON: `{"frames": [{"frame": t, "points": [[x_um, z_um], ...]}]}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex32;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Result, SrusError};
use crate::fieldsim::{GridSpec, LabelMap};
use crate::stack::IqFrameStack;

pub const IQF_MAGIC: &[u8; 4] = b"IQF1";
pub const LBL_MAGIC: &[u8; 4] = b"LBL1";

pub fn encode_iqf(frames: &Array3<Complex32>) -> Vec<u8> {
    let (t, h, w) = frames.dim();
    let mut out = Vec::with_capacity(16 + t * h * w * 8);
    out.extend_from_slice(IQF_MAGIC);
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for c in frames.iter() {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
    out
}

pub fn decode_iqf(bytes: &[u8], path: &Path) -> Result<Array3<Complex32>> {
    let bad = |msg: &str| SrusError::format(path, msg);
    if bytes.len() < 16 || &bytes[..4] != IQF_MAGIC {
        return Err(bad("missing IQF1 header"));
    }
    let dims: Vec<usize> = (0..3).map(|i| read_u32(bytes, 4 + 4 * i) as usize).collect();
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() != 16 + n * 8 {
        return Err(bad(&format!(
            "expected {} payload bytes for {}x{}x{}, found {}",
            n * 8,
            dims[0],
            dims[1],
            dims[2],
            bytes.len() - 16
        )));
    }
    let data: Vec<Complex32> = bytes[16..]
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes(c[..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..].try_into().unwrap()),
            )
        })
        .collect();
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).map_err(|e| bad(&e.to_string()))
}

pub fn write_iqf(path: &Path, stack: &IqFrameStack) -> Result<()> {
    write_bytes(path, &encode_iqf(&stack.frames))
}

/// Read a stack; `grid` supplies pitch, wavelength and K, the file supplies H and W.
pub fn read_iqf(path: &Path, grid: &GridSpec) -> Result<IqFrameStack> {
    let bytes = fs::read(path).map_err(|e| SrusError::io(path, e))?;
    let frames = decode_iqf(&bytes, path)?;
    let (_, h, w) = frames.dim();
    let g = GridSpec {
        width_px: w,
        height_px: h,
        ..*grid
    };
    IqFrameStack::new(frames, g).map_err(|e| SrusError::format(path, e.to_string()))
}

pub fn encode_lbl(labels: &LabelMap) -> Vec<u8> {
    let (h, w) = labels.dim();
    let mut out = Vec::with_capacity(16 + 3 * h * w);
    out.extend_from_slice(LBL_MAGIC);
    for d in [h, w, labels.k] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for map in [&labels.detect, &labels.xbin, &labels.zbin] {
        out.extend(map.iter().copied());
    }
    out
}

pub fn decode_lbl(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let bad = |msg: String| SrusError::format(path, msg);
    if bytes.len() < 16 || &bytes[..4] != LBL_MAGIC {
        return Err(bad("missing LBL1 header".into()));
    }
    let (h, w, k) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let n = h * w;
    if bytes.len() != 16 + 3 * n {
        return Err(bad(format!("expected {} map bytes, found {}", 3 * n, bytes.len() - 16)));
    }
    if !(2..=255).contains(&k) {
        return Err(bad(format!("invalid bin count {k}")));
    }
    let map = |i: usize| Array2::from_shape_vec((h, w), bytes[16 + i * n..16 + (i + 1) * n].to_vec()).unwrap();
    let labels = LabelMap {
        detect: map(0),
        xbin: map(1),
        zbin: map(2),
        k,
    };
    if labels.detect.iter().any(|&d| d > 1) {
        return Err(bad("detect map must be 0/1".into()));
    }
    if labels.xbin.iter().chain(labels.zbin.iter()).any(|&b| b as usize >= k) {
        return Err(bad(format!("offset bin outside [0, {k})")));
    }
    Ok(labels)
}

pub fn write_lbl(path: &Path, labels: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_lbl(labels))
}

pub fn read_lbl(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| SrusError::io(path, e))?;
    decode_lbl(&bytes, path)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| SrusError::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| SrusError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePoints {
    pub frame: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSet {
    pub frames: Vec<FramePoints>,
}

impl PointSet {
    pub fn points_at(&self, frame: usize) -> Option<&[[f64; 2]]> {
        self.frames
            .iter()
            .find(|f| f.frame == frame)
            .map(|f| f.points.as_slice())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SrusError::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SrusError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SrusError::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldsim::encode_labels;

    #[test]
    fn iqf_layout_is_byte_exact() {
        let frames = Array3::from_shape_vec(
            (1, 1, 2),
            vec![Complex32::new(1.0, -2.0), Complex32::new(0.5, 0.0)],
        )
        .unwrap();
        let bytes = encode_iqf(&frames);
        let mut expected = b"IQF1".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
        expected.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x00, 0x00]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_iqf(&bytes, Path::new("x")).unwrap(), frames);
    }

    #[test]
    fn lbl_layout_is_byte_exact() {
        let g = GridSpec::with_size(16, 16);
        let (labels, _) = encode_labels(&[[64.4, 100.0]], &g);
        let bytes = encode_lbl(&labels);
        assert_eq!(&bytes[..16], &[b'L', b'B', b'L', b'1', 16, 0, 0, 0, 16, 0, 0, 0, 4, 0, 0, 0]);
        // pixel (1, 1): z frac 100/51.5 - 1 = 0.9417 -> bin 3; x bin 1
        let at = 16 + 16 + 1;
        assert_eq!(bytes[at], 1);
        assert_eq!(bytes[at + 256], 1);
        assert_eq!(bytes[at + 512], 3);
        assert_eq!(decode_lbl(&bytes, Path::new("x")).unwrap(), labels);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let p = Path::new("bad");
        assert!(matches!(decode_iqf(b"IQF2", p), Err(SrusError::Format { .. })));
        let mut bytes = encode_iqf(&Array3::zeros((1, 2, 2)));
        bytes.pop();
        assert!(decode_iqf(&bytes, p).is_err());
        let mut lbl = encode_lbl(&LabelMap::empty(2, 2, 4));
        lbl[16 + 4] = 9;
        assert!(decode_lbl(&lbl, p).is_err());
    }

    #[test]
    fn files_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::with_size(16, 17);
        let frames = Array3::from_shape_fn((3, 17, 16), |(t, i, j)| {
            Complex32::new((t as f32 + 0.1).sin() * i as f32, f32::EPSILON * j as f32)
        });
        let st = IqFrameStack::new(frames, g).unwrap();
        let p = dir.path().join("s.iqf");
        write_iqf(&p, &st).unwrap();
        assert_eq!(read_iqf(&p, &GridSpec::default()).unwrap(), st);

        let (labels, _) = encode_labels(&[[10.0, 20.0], [300.0, 700.0]], &g);
        let p = dir.path().join("s.lbl");
        write_lbl(&p, &labels).unwrap();
        assert_eq!(read_lbl(&p).unwrap(), labels);
    }
}
