use ndarray::{s, Array2, Array3, ArrayView2};
use num_complex::{Complex32, Complex64};

use crate::error::{Result, SrusError};
use crate::fieldsim::GridSpec;

/// Time-ordered stack of beamformed complex frames, `[T][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrameStack {
    pub frames: Array3<Complex32>,
    pub grid: GridSpec,
}

impl IqFrameStack {
    pub fn new(frames: Array3<Complex32>, grid: GridSpec) -> Result<Self> {
        let (t, h, w) = frames.dim();
        if t == 0 {
            return Err(SrusError::input("frame stack is empty"));
        }
        if h != grid.height_px || w != grid.width_px {
            return Err(SrusError::shape(format!(
                "frames are {h}x{w} but grid is {}x{}",
                grid.height_px, grid.width_px
            )));
        }
        if frames.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(SrusError::input("frame stack contains non-finite values"));
        }
        Ok(Self { frames, grid })
    }

    pub fn from_frames(frames: &[Array2<Complex64>], grid: GridSpec) -> Result<Self> {
        let (h, w) = frames
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| SrusError::input("frame stack is empty"))?;
        let mut out = Array3::zeros((frames.len(), h, w));
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != (h, w) {
                return Err(SrusError::shape("frames differ in size"));
            }
            out.slice_mut(s![t, .., ..])
                .zip_mut_with(f, |o, v| *o = Complex32::new(v.re as f32, v.im as f32));
        }
        Self::new(out, grid)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, Complex32> {
        self.frames.slice(s![t, .., ..])
    }
}
