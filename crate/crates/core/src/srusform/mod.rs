//! Super-resolved image formation.
//!
//! A stack is filtered and envelope-detected once, then the network runs on
//! every window of `m` consecutive frames. Each detection is decoded to the
//! centre of its offset bin and counted on a grid K times finer than the
//! input. The count image is optionally log-compressed and passed through a
//! vessel enhancer.

mod export;
mod vessel;

use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::clutterfilt::{normalized_envelope, ClutterFilter, FilterConfig};
use crate::error::{Result, SrusError};
use crate::fieldsim::GridSpec;
use crate::formats::{FramePoints, PointSet};
use crate::network::{predict, Detection, NetParams};
use crate::registry::StrategySpec;
use crate::stack::IqFrameStack;

pub use export::{read_png16, write_png16, write_srus_outputs, SrusSidecar, SIDECAR_FORMAT};
pub use vessel::{enhancers, jerman_enhance, Identity, Jerman, VesselEnhancer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowPlan {
    pub m: usize,
    pub stride: usize,
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self { m: 3, stride: 1 }
    }
}

impl WindowPlan {
    pub fn new(m: usize) -> Self {
        Self { m, stride: 1 }
    }

    pub fn center_offset(&self) -> usize {
        (self.m - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m % 2 == 0 {
            return Err(SrusError::config(format!("window m must be odd, got {}", self.m)));
        }
        if self.stride == 0 {
            return Err(SrusError::config("window stride must be at least 1"));
        }
        Ok(())
    }
}

/// Frames `[start, end)` feeding one prediction for frame `center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub center: usize,
}

/// Windows over a `t`-frame stack, unpadded.
pub fn sliding_windows(t: usize, plan: &WindowPlan) -> Result<Vec<Window>> {
    plan.validate()?;
    if t < plan.m {
        return Err(SrusError::input(format!("stack of {t} frames is shorter than the window m={}", plan.m)));
    }
    Ok((0..=t - plan.m)
        .step_by(plan.stride)
        .map(|start| Window {
            start,
            end: start + plan.m,
            center: start + plan.center_offset(),
        })
        .collect())
}

/// Continuous `[x, z]` position of each detection at the centre of its bin.
pub fn decode_detections(dets: &[Detection], grid: &GridSpec) -> Vec<[f64; 2]> {
    let k = grid.upsample_k as f64;
    let p = grid.pitch_um;
    dets.iter()
        .map(|d| {
            [
                (d.j as f64 + (d.kx as f64 + 0.5) / k) * p,
                (d.i as f64 + (d.kz as f64 + 0.5) / k) * p,
            ]
        })
        .collect()
}

/// Detection counts on the fine grid, `[K*H][K*W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGridImage {
    pub counts: Array2<f64>,
    pub grid: GridSpec,
}

impl FineGridImage {
    pub fn new(grid: GridSpec) -> Self {
        let k = grid.upsample_k;
        Self {
            counts: Array2::zeros((k * grid.height_px, k * grid.width_px)),
            grid,
        }
    }

    /// Add one count per in-field point. Returns how many were outside.
    pub fn accumulate(&mut self, points: &[[f64; 2]]) -> usize {
        let f = self.grid.fine_pitch_um();
        let (rows, cols) = self.counts.dim();
        let mut skipped = 0;
        for &[x, z] in points {
            if !self.grid.contains(x, z) {
                skipped += 1;
                continue;
            }
            let (r, c) = ((z / f).floor() as usize, (x / f).floor() as usize);
            if r >= rows || c >= cols {
                skipped += 1;
                continue;
            }
            self.counts[[r, c]] += 1.0;
        }
        skipped
    }

    pub fn merge(&mut self, other: &FineGridImage) -> Result<()> {
        if self.counts.dim() != other.counts.dim() {
            return Err(SrusError::shape("cannot merge images of different size"));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }
}

/// Settings for turning a stack into an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormConfig {
    pub window: WindowPlan,
    pub threshold: f64,
    /// Skip clutter filtering when the stack is already filtered.
    pub apply_filter: bool,
    pub filter: FilterConfig,
    /// Enhance `ln(1 + counts)` instead of raw counts.
    pub log_compress: bool,
    pub enhancer: StrategySpec,
}

impl Default for FormConfig {
    fn default() -> Self {
        Self {
            window: WindowPlan::default(),
            threshold: 0.5,
            apply_filter: true,
            filter: FilterConfig::default(),
            log_compress: false,
            enhancer: StrategySpec::named("jerman"),
        }
    }
}

/// Bookkeeping for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub center: usize,
    pub detections: usize,
    pub out_of_field: usize,
}

#[derive(Debug, Clone)]
pub struct SrusResult {
    pub raw: FineGridImage,
    pub enhanced: FineGridImage,
    pub windows: Vec<WindowRecord>,
    /// Decoded positions per centre frame.
    pub predictions: PointSet,
    pub ms_per_frame: f64,
}

/// Full formation chain for one stack.
pub fn form_srus(stack: &IqFrameStack, params: &NetParams<f32>, cfg: &FormConfig) -> Result<SrusResult> {
    let plan = cfg.window;
    if plan.m != params.cfg.m {
        return Err(SrusError::config(format!(
            "window m={} but the network was built for m={}",
            plan.m, params.cfg.m
        )));
    }
    if stack.grid.upsample_k != params.cfg.k_bins {
        return Err(SrusError::config(format!(
            "grid K={} but the network has k_bins={}",
            stack.grid.upsample_k, params.cfg.k_bins
        )));
    }
    let windows = sliding_windows(stack.len(), &plan)?;
    let enhancer = enhancers().build(&cfg.enhancer)?;
    let filter = if cfg.apply_filter {
        Some(ClutterFilter::from_config(&cfg.filter)?)
    } else {
        None
    };
    let env = normalized_envelope(stack, filter.as_ref())?;

    let mut raw = FineGridImage::new(stack.grid);
    let mut records = Vec::with_capacity(windows.len());
    let mut predictions = PointSet::default();
    let start = Instant::now();
    for w in &windows {
        let input = env.slice(s![w.start..w.end, .., ..]);
        let dets = predict(params, input, cfg.threshold).map_err(|e| SrusError::Frame {
            frame: w.center,
            source: Box::new(e),
        })?;
        let points = decode_detections(&dets, &stack.grid);
        let out_of_field = raw.accumulate(&points);
        records.push(WindowRecord {
            center: w.center,
            detections: dets.len(),
            out_of_field,
        });
        predictions.frames.push(FramePoints {
            frame: w.center,
            points,
        });
    }
    let ms_per_frame = start.elapsed().as_secs_f64() * 1e3 / windows.len() as f64;

    let source = if cfg.log_compress {
        raw.counts.mapv(f64::ln_1p)
    } else {
        raw.counts.clone()
    };
    let enhanced = FineGridImage {
        counts: enhancer.enhance(&source)?,
        grid: stack.grid,
    };
    Ok(SrusResult {
        raw,
        enhanced,
        windows: records,
        predictions,
        ms_per_frame,
    })
}
