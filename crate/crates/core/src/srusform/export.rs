use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FormConfig, SrusResult, WindowRecord};
use crate::error::{Result, SrusError};
use crate::fieldsim::GridSpec;
use crate::formats::{write_json, PointSet};

pub const SIDECAR_FORMAT: &str = "srus-image/1";

/// Store `round(v / scale)` as 16-bit grayscale, clamped to the u16 range.
pub fn write_png16(path: &Path, img: &Array2<f64>, scale: f64) -> Result<()> {
    let (h, w) = img.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = img[[y as usize, x as usize]] / scale;
        Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    buf.save(path).map_err(|e| SrusError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read any grayscale PNG as 16-bit levels.
pub fn read_png16(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)
        .map_err(|e| SrusError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| SrusError::format(path, e.to_string()))
}

/// Metadata written next to the exported images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrusSidecar {
    pub format: String,
    pub grid: GridSpec,
    pub k: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub raw_png: PathBuf,
    pub enhanced_png: PathBuf,
    /// Counts represented by one raw PNG level.
    pub raw_scale: f64,
    pub total_counts: f64,
    pub out_of_field: usize,
    pub ms_per_frame: f64,
    pub windows: Vec<WindowRecord>,
    pub predictions: PointSet,
    pub config: FormConfig,
    pub checkpoint: Option<PathBuf>,
    /// Caller-supplied settings recorded verbatim.
    pub config_echo: serde_json::Value,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Write `out` (raw counts), `<stem>.enhanced.png` and `<stem>.json`.
/// Counts are stored exactly unless the peak exceeds the 16-bit range.
pub fn write_srus_outputs(
    out: &Path,
    res: &SrusResult,
    cfg: &FormConfig,
    checkpoint: Option<&Path>,
    config_echo: serde_json::Value,
) -> Result<SrusSidecar> {
    let max = res.raw.counts.iter().cloned().fold(0.0f64, f64::max);
    let raw_scale = if max > u16::MAX as f64 { max / u16::MAX as f64 } else { 1.0 };
    write_png16(out, &res.raw.counts, raw_scale)?;
    let enhanced_png = sibling(out, ".enhanced.png");
    let emax = res.enhanced.counts.iter().cloned().fold(0.0f64, f64::max);
    write_png16(&enhanced_png, &res.enhanced.counts, if emax > 0.0 { emax / u16::MAX as f64 } else { 1.0 })?;
    let (h, w) = res.raw.counts.dim();
    let sidecar = SrusSidecar {
        format: SIDECAR_FORMAT.to_string(),
        grid: res.raw.grid,
        k: res.raw.grid.upsample_k,
        image_height: h,
        image_width: w,
        raw_png: out.to_path_buf(),
        enhanced_png,
        raw_scale,
        total_counts: res.raw.total(),
        out_of_field: res.windows.iter().map(|r| r.out_of_field).sum(),
        ms_per_frame: res.ms_per_frame,
        windows: res.windows.clone(),
        predictions: res.predictions.clone(),
        config: cfg.clone(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        config_echo,
    };
    write_json(&sibling(out, ".json"), &sidecar)?;
    Ok(sidecar)
}
