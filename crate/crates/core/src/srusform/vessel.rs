//! Hessian-based vessel enhancement.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrusError};
use crate::registry::{parse_params, Registry};

/// Transforms an accumulated image into a vessel map.
pub trait VesselEnhancer: Send + Sync {
    fn name(&self) -> &str;
    fn enhance(&self, img: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Jerman-style vesselness for bright tubes on a dark background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jerman {
    /// Gaussian scales in fine-grid pixels.
    pub scales: Vec<f64>,
    pub tau: f64,
}

impl Default for Jerman {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 3.0],
            tau: 0.5,
        }
    }
}

impl VesselEnhancer for Jerman {
    fn name(&self) -> &str {
        "jerman"
    }

    fn enhance(&self, img: &Array2<f64>) -> Result<Array2<f64>> {
        jerman_enhance(img, &self.scales, self.tau)
    }
}

/// Pass-through.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Identity {}

impl VesselEnhancer for Identity {
    fn name(&self) -> &str {
        "none"
    }

    fn enhance(&self, img: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(img.clone())
    }
}

pub fn enhancers() -> Registry<dyn VesselEnhancer> {
    let mut r: Registry<dyn VesselEnhancer> = Registry::new("vessel enhancer");
    r.register("jerman", |p| {
        let j: Jerman = parse_params("jerman", p)?;
        validate(&j.scales, j.tau)?;
        Ok(Box::new(j))
    });
    r.register("none", |p| Ok(Box::new(parse_params::<Identity>("none", p)?)));
    r
}

fn validate(scales: &[f64], tau: f64) -> Result<()> {
    if scales.is_empty() {
        return Err(SrusError::config("vesselness needs at least one scale"));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(SrusError::config("vesselness scales must be positive"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(SrusError::config(format!("tau must be in (0, 1], got {tau}")));
    }
    Ok(())
}

fn gaussian_kernel(sigma: f64) -> Array1<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k = Array1::from_iter((-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()));
    let s = k.sum();
    k /= s;
    k
}

/// 1-D correlation along `axis` with replicated borders.
fn smooth_axis(img: &Array2<f64>, k: &Array1<f64>, axis: usize) -> Array2<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = Array2::zeros(img.raw_dim());
    for (src, mut dst) in img.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        let n = src.len() as isize;
        for i in 0..n {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let idx = (i + t as isize - r).clamp(0, n - 1) as usize;
                acc += kv * src[idx];
            }
            dst[i as usize] = acc;
        }
    }
    out
}

/// Central-difference Hessian `(xx, yy, xy)` with replicated borders; `x` is
/// the column axis.
fn hessian(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |i: isize, j: isize| img[[i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]];
    let mut xx = Array2::zeros((h, w));
    let mut yy = Array2::zeros((h, w));
    let mut xy = Array2::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let c = at(i, j);
            let idx = [i as usize, j as usize];
            xx[idx] = at(i, j + 1) - 2.0 * c + at(i, j - 1);
            yy[idx] = at(i + 1, j) - 2.0 * c + at(i - 1, j);
            xy[idx] = (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1) + at(i - 1, j - 1)) / 4.0;
        }
    }
    (xx, yy, xy)
}

/// Eigenvalue of largest magnitude of a symmetric 2×2 matrix.
fn dominant_eigenvalue(a: f64, d: f64, b: f64) -> f64 {
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + rad, mean - rad);
    if l1.abs() >= l2.abs() {
        l1
    } else {
        l2
    }
}

fn response(l2: f64, rho: f64) -> f64 {
    if l2 <= 0.0 || rho <= 0.0 {
        0.0
    } else if l2 >= rho / 2.0 {
        1.0
    } else {
        let v = l2 * l2 * (rho - l2) * (3.0 / (l2 + rho)).powi(3);
        v.clamp(0.0, 1.0)
    }
}

/// Multi-scale vesselness in `[0, 1]`, the maximum over scales.
///
/// Per scale the image is Gaussian-smoothed, its Hessian scaled by `s^2`,
/// and the larger-magnitude eigenvalue negated so bright ridges are
/// positive. Values below `tau` times the image maximum are regularized up
/// to that level before the response is evaluated.
pub fn jerman_enhance(img: &Array2<f64>, scales: &[f64], tau: f64) -> Result<Array2<f64>> {
    validate(scales, tau)?;
    if img.iter().any(|v| !v.is_finite()) {
        return Err(SrusError::input("vesselness input contains non-finite values"));
    }
    let mut best = Array2::<f64>::zeros(img.raw_dim());
    if img.is_empty() {
        return Ok(best);
    }
    let magnitude = img.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for &s in scales {
        let k = gaussian_kernel(s);
        let smooth = smooth_axis(&smooth_axis(img, &k, 1), &k, 0);
        let (xx, yy, xy) = hessian(&smooth);
        let s2 = s * s;
        let mut lam = Array2::zeros(img.raw_dim());
        ndarray::Zip::from(&mut lam)
            .and(&xx)
            .and(&yy)
            .and(&xy)
            .for_each(|l, &a, &d, &b| *l = (-s2 * dominant_eigenvalue(a, d, b)).max(0.0));
        let max = lam.iter().cloned().fold(0.0f64, f64::max);
        // Rounding-level curvature on flat images is not structure.
        if max <= 1e-12 * magnitude {
            continue;
        }
        let floor = tau * max;
        ndarray::Zip::from(&mut best).and(&lam).for_each(|b, &l| {
            let rho = if l > floor { l } else { floor };
            *b = b.max(response(l, rho));
        });
    }
    Ok(best)
}
