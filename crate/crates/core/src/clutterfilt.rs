//! Block-wise spatiotemporal SVD clutter filter and envelope detection.
//!
//! Each spatial block of the IQ stack is reshaped into a Casorati matrix
//! (pixels x slow time). Static tissue concentrates in the leading singular
//! triplets and noise in the trailing ones; the filter keeps the band
//! `[lower, upper]`. `upper` is fixed by a maximum singular-value count and
//! `lower` is chosen per block by a pluggable [`LowerCutoffRule`].

use nalgebra::{DMatrix, SVD};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrusError};
use crate::registry::{parse_params, Registry, StrategySpec};
use crate::stack::IqFrameStack;

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockGeometry {
    pub block_h: usize,
    pub block_w: usize,
    pub overlap: usize,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        Self {
            block_h: 76,
            block_w: 76,
            overlap: 0,
        }
    }
}

impl BlockGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.block_h == 0 || self.block_w == 0 {
            return Err(SrusError::config("block dimensions must be positive"));
        }
        if self.overlap >= self.block_h || self.overlap >= self.block_w {
            return Err(SrusError::config("block overlap must be smaller than the block"));
        }
        Ok(())
    }

    /// `(start, len)` of the blocks along an axis of length `n`; the last is clipped.
    pub fn tiles(n: usize, block: usize, overlap: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let len = block.min(n - start);
            out.push((start, len));
            if start + len >= n {
                break;
            }
            start += block - overlap;
        }
        out
    }
}

/// Inclusive band of retained singular indices (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdCutoffs {
    pub lower: usize,
    pub upper: usize,
}

impl SvdCutoffs {
    pub fn validate(&self, rank: usize) -> Result<()> {
        if self.lower > self.upper || self.upper >= rank {
            return Err(SrusError::input(format!(
                "cutoffs [{}, {}] invalid for rank {rank}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Pixels-by-time matrix: column `t` is frame `t` flattened row-major.
pub fn casorati(block: ArrayView3<'_, Complex64>) -> DMatrix<Complex64> {
    let (t, h, w) = block.dim();
    DMatrix::from_fn(h * w, t, |r, c| block[[c, r / w, r % w]])
}

pub fn from_casorati(m: &DMatrix<Complex64>, h: usize, w: usize) -> Array3<Complex64> {
    Array3::from_shape_fn((m.ncols(), h, w), |(t, i, j)| m[(i * w + j, t)])
}

/// Thin SVD of a Casorati matrix with singular values in descending order.
pub struct BlockSvd {
    svd: SVD<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl BlockSvd {
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        let (r, c) = m.shape();
        if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(SrusError::numeric("non-finite value in Casorati matrix"));
        }
        let svd = SVD::try_new(m, true, true, SVD_EPS, SVD_MAX_ITER).ok_or_else(|| {
            SrusError::numeric(format!("SVD of {r}x{c} Casorati matrix did not converge"))
        })?;
        Ok(Self { svd })
    }

    pub fn singular_values(&self) -> &[f64] {
        self.svd.singular_values.as_slice()
    }

    pub fn rank(&self) -> usize {
        self.svd.singular_values.len()
    }

    /// Sum of the singular triplets with index in `[lower, upper]`.
    pub fn reconstruct(&self, cutoffs: SvdCutoffs) -> Result<DMatrix<Complex64>> {
        cutoffs.validate(self.rank())?;
        let u = self.svd.u.as_ref().expect("u computed");
        let vt = self.svd.v_t.as_ref().expect("v_t computed");
        let n = cutoffs.upper - cutoffs.lower + 1;
        let mut us = u.columns(cutoffs.lower, n).into_owned();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= Complex64::new(self.svd.singular_values[cutoffs.lower + k], 0.0);
        }
        Ok(us * vt.rows(cutoffs.lower, n))
    }
}

pub fn svd_filter_block(block: ArrayView3<'_, Complex64>, cutoffs: SvdCutoffs) -> Result<Array3<Complex64>> {
    let (t, h, w) = block.dim();
    if t < 2 {
        return Err(SrusError::input("SVD filtering needs at least two frames"));
    }
    let svd = BlockSvd::new(casorati(block))?;
    Ok(from_casorati(&svd.reconstruct(cutoffs)?, h, w))
}

/// Chooses the first retained singular index from a descending spectrum.
pub trait LowerCutoffRule: Send + Sync {
    fn name(&self) -> &str;
    fn lower_cutoff(&self, singular_values: &[f64]) -> Result<usize>;
}

fn check_spectrum(sv: &[f64]) -> Result<()> {
    if sv.len() < 2 {
        return Err(SrusError::input("need at least two singular values"));
    }
    if !(sv[0] > 0.0) || sv.iter().any(|v| !v.is_finite()) {
        return Err(SrusError::input("leading singular value must be positive and finite"));
    }
    if sv.windows(2).any(|w| w[1] > w[0]) {
        return Err(SrusError::input("singular values must be in descending order"));
    }
    Ok(())
}

/// Tissue/blood boundary where the normalized singular-value curve flattens
/// to a given slope angle against the abscissa.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlopeCutoff {
    pub angle_deg: f64,
}

impl Default for SlopeCutoff {
    fn default() -> Self {
        Self { angle_deg: 30.0 }
    }
}

impl LowerCutoffRule for SlopeCutoff {
    fn name(&self) -> &str {
        "slope"
    }

    /// Both axes are normalized to [0, 1] (values by the first, indices by
    /// N-1). Returns the smallest `i >= 1` whose incoming segment has
    /// `|slope| <= tan(angle)`, or 1 when the curve never flattens.
    fn lower_cutoff(&self, sv: &[f64]) -> Result<usize> {
        check_spectrum(sv)?;
        let limit = self.angle_deg.to_radians().tan();
        let span = (sv.len() - 1) as f64;
        let first = sv[0];
        Ok((1..sv.len())
            .find(|&i| ((sv[i] - sv[i - 1]) / first * span).abs() <= limit)
            .unwrap_or(1))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedCutoff {
    pub lower: usize,
}

impl LowerCutoffRule for FixedCutoff {
    fn name(&self) -> &str {
        "fixed"
    }

    fn lower_cutoff(&self, sv: &[f64]) -> Result<usize> {
        if sv.is_empty() {
            return Err(SrusError::input("empty singular spectrum"));
        }
        Ok(self.lower.min(sv.len() - 1))
    }
}

pub fn auto_lower_cutoff(singular_values: &[f64]) -> Result<usize> {
    SlopeCutoff::default().lower_cutoff(singular_values)
}

pub fn cutoff_rules() -> Registry<dyn LowerCutoffRule> {
    let mut r: Registry<dyn LowerCutoffRule> = Registry::new("lower cutoff");
    r.register("slope", |p| Ok(Box::new(parse_params::<SlopeCutoff>("slope", p)?)));
    r.register("fixed", |p| Ok(Box::new(parse_params::<FixedCutoff>("fixed", p)?)));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub geometry: BlockGeometry,
    /// Number of leading singular values that may be kept (1-based count).
    pub max_sv: usize,
    pub lower_cutoff: StrategySpec,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            geometry: BlockGeometry::default(),
            max_sv: 400,
            lower_cutoff: StrategySpec::named("slope"),
        }
    }
}

/// Per-block record of the band that was kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub row: usize,
    pub col: usize,
    pub rank: usize,
    pub cutoffs: SvdCutoffs,
}

pub struct ClutterFilter {
    pub geometry: BlockGeometry,
    pub max_sv: usize,
    rule: Box<dyn LowerCutoffRule>,
}

impl ClutterFilter {
    pub fn new(geometry: BlockGeometry, max_sv: usize, rule: Box<dyn LowerCutoffRule>) -> Result<Self> {
        geometry.validate()?;
        if max_sv == 0 {
            return Err(SrusError::config("max_sv must be at least 1"));
        }
        Ok(Self { geometry, max_sv, rule })
    }

    pub fn from_config(cfg: &FilterConfig) -> Result<Self> {
        Self::new(cfg.geometry, cfg.max_sv, cutoff_rules().build(&cfg.lower_cutoff)?)
    }

    pub fn rule_name(&self) -> &str {
        self.rule.name()
    }

    fn filter_one(&self, block: Array3<Complex64>) -> Result<(Array3<Complex64>, usize, SvdCutoffs)> {
        let (_, h, w) = block.dim();
        let svd = BlockSvd::new(casorati(block.view()))?;
        let rank = svd.rank();
        let upper = (self.max_sv - 1).min(rank - 1);
        let lower = self.rule.lower_cutoff(svd.singular_values())?.min(upper);
        let cutoffs = SvdCutoffs { lower, upper };
        Ok((from_casorati(&svd.reconstruct(cutoffs)?, h, w), rank, cutoffs))
    }

    /// Filter every block and reassemble, averaging where blocks overlap.
    pub fn apply(&self, stack: &IqFrameStack) -> Result<(IqFrameStack, Vec<BlockReport>)> {
        let (t, h, w) = stack.frames.dim();
        if t < 2 {
            return Err(SrusError::input("SVD filtering needs at least two frames"));
        }
        let g = self.geometry;
        let rows = BlockGeometry::tiles(h, g.block_h, g.overlap);
        let cols = BlockGeometry::tiles(w, g.block_w, g.overlap);
        let jobs: Vec<((usize, usize), (usize, usize))> = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        let results = jobs
            .par_iter()
            .map(|&((r0, rh), (c0, cw))| {
                let block = stack
                    .frames
                    .slice(s![.., r0..r0 + rh, c0..c0 + cw])
                    .mapv(|c| Complex64::new(c.re as f64, c.im as f64));
                self.filter_one(block).map_err(|e| SrusError::Block {
                    row: r0,
                    col: c0,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut acc = Array3::<Complex64>::zeros((t, h, w));
        let mut weight = Array2::<f64>::zeros((h, w));
        let mut reports = Vec::with_capacity(jobs.len());
        for (&((r0, rh), (c0, cw)), (out, rank, cutoffs)) in jobs.iter().zip(results) {
            acc.slice_mut(s![.., r0..r0 + rh, c0..c0 + cw]).zip_mut_with(&out, |a, &b| *a += b);
            weight.slice_mut(s![r0..r0 + rh, c0..c0 + cw]).mapv_inplace(|v| v + 1.0);
            reports.push(BlockReport {
                row: r0,
                col: c0,
                rank,
                cutoffs,
            });
        }
        let frames = Array3::from_shape_fn((t, h, w), |(k, i, j)| {
            let v = acc[[k, i, j]] / weight[[i, j]];
            Complex32::new(v.re as f32, v.im as f32)
        });
        Ok((IqFrameStack::new(frames, stack.grid)?, reports))
    }
}

/// Slope-rule filter with the given block geometry and maximum singular-value count.
pub fn filter_stack(stack: &IqFrameStack, geom: BlockGeometry, max_sv: usize) -> Result<IqFrameStack> {
    Ok(ClutterFilter::new(geom, max_sv, Box::new(SlopeCutoff::default()))?
        .apply(stack)?
        .0)
}

pub fn envelope(frame: ArrayView2<'_, Complex32>) -> Array2<f32> {
    frame.mapv(|c| c.norm())
}

pub fn envelope_stack(stack: &IqFrameStack) -> Array3<f32> {
    let (t, h, w) = stack.frames.dim();
    let mut out = Array3::zeros((t, h, w));
    for (mut o, f) in out.axis_iter_mut(Axis(0)).zip(stack.frames.axis_iter(Axis(0))) {
        o.assign(&envelope(f));
    }
    out
}

/// Network input for a stack: optional clutter filtering, envelope, then
/// division by the RMS envelope over the whole stack. An all-zero envelope
/// stays zero.
pub fn normalized_envelope(stack: &IqFrameStack, filter: Option<&ClutterFilter>) -> Result<Array3<f32>> {
    let env = match filter {
        Some(f) => envelope_stack(&f.apply(stack)?.0),
        None => envelope_stack(stack),
    };
    let ms = env.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / env.len().max(1) as f64;
    if ms > 0.0 {
        let inv = (1.0 / ms.sqrt()) as f32;
        Ok(env.mapv(|v| v * inv))
    } else {
        Ok(env)
    }
}
