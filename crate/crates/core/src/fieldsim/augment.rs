use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use super::{GridSpec, LabelMap};
use crate::error::{Result, SrusError};
use crate::stack::IqFrameStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    /// Mirror the lateral axis.
    HFlip,
    /// Keep the coarse-pixel window starting at (`top`, `left`).
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
}

impl AugmentOp {
    fn check(&self, grid: &GridSpec) -> Result<GridSpec> {
        match *self {
            AugmentOp::HFlip => Ok(*grid),
            AugmentOp::Crop {
                top,
                left,
                height,
                width,
            } => {
                if top + height > grid.height_px || left + width > grid.width_px {
                    return Err(SrusError::input(format!(
                        "crop {height}x{width} at ({top}, {left}) exceeds {}x{} frame",
                        grid.height_px, grid.width_px
                    )));
                }
                let g = GridSpec {
                    width_px: width,
                    height_px: height,
                    ..*grid
                };
                g.validate()?;
                Ok(g)
            }
        }
    }
}

pub fn augment(
    stack: &IqFrameStack,
    labels: &LabelMap,
    op: AugmentOp,
) -> Result<(IqFrameStack, LabelMap)> {
    if labels.dim() != (stack.grid.height_px, stack.grid.width_px) {
        return Err(SrusError::shape("labels and frames differ in size"));
    }
    let grid = op.check(&stack.grid)?;
    match op {
        AugmentOp::HFlip => {
            let mut frames = stack.frames.clone();
            frames.invert_axis(Axis(2));
            let k = labels.k as u8;
            let mut out = labels.clone();
            out.detect.invert_axis(Axis(1));
            out.xbin.invert_axis(Axis(1));
            out.zbin.invert_axis(Axis(1));
            // Standard layout again, so downstream slicing sees contiguous rows.
            out.detect = out.detect.as_standard_layout().into_owned();
            out.zbin = out.zbin.as_standard_layout().into_owned();
            out.xbin = out.xbin.as_standard_layout().into_owned();
            ndarray::Zip::from(&mut out.xbin)
                .and(&out.detect)
                .for_each(|x, &d| {
                    if d != 0 {
                        *x = k - 1 - *x;
                    }
                });
            let frames = frames.as_standard_layout().into_owned();
            Ok((IqFrameStack::new(frames, grid)?, out))
        }
        AugmentOp::Crop {
            top,
            left,
            height,
            width,
        } => {
            let frames = stack
                .frames
                .slice(s![.., top..top + height, left..left + width])
                .to_owned();
            let win = s![top..top + height, left..left + width];
            let out = LabelMap {
                detect: labels.detect.slice(win).to_owned(),
                xbin: labels.xbin.slice(win).to_owned(),
                zbin: labels.zbin.slice(win).to_owned(),
                k: labels.k,
            };
            Ok((IqFrameStack::new(frames, grid)?, out))
        }
    }
}

/// Apply the geometric part of `op` to continuous positions. Points that leave
/// the new field are dropped. Returns the transformed points and the new grid.
pub fn transform_points(
    points: &[[f64; 2]],
    grid: &GridSpec,
    op: AugmentOp,
) -> Result<(Vec<[f64; 2]>, GridSpec)> {
    let out_grid = op.check(grid)?;
    let p = grid.pitch_um;
    let mapped = points.iter().filter_map(|&[x, z]| {
        let q = match op {
            AugmentOp::HFlip => [grid.field_width_um() - x, z],
            AugmentOp::Crop { top, left, .. } => [x - left as f64 * p, z - top as f64 * p],
        };
        out_grid.contains(q[0], q[1]).then_some(q)
    });
    Ok((mapped.collect(), out_grid))
}
