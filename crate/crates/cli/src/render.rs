//! Display rendering of accumulated images.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use srus_core::registry::{parse_params, Registry, StrategySpec};
use srus_core::{Result, SrusError};

/// Maps a normalized intensity in `[0, 1]` to RGB in `[0, 1]`.
pub trait Colormap: Send + Sync {
    fn name(&self) -> &str;
    fn rgb(&self, t: f64) -> [f64; 3];
    /// Single-channel output is enough.
    fn is_gray(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gray {}

impl Colormap for Gray {
    fn name(&self) -> &str {
        "gray"
    }

    fn rgb(&self, t: f64) -> [f64; 3] {
        [t, t, t]
    }

    fn is_gray(&self) -> bool {
        true
    }
}

/// Black through red and yellow to white.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hot {}

impl Colormap for Hot {
    fn name(&self) -> &str {
        "hot"
    }

    fn rgb(&self, t: f64) -> [f64; 3] {
        let c = |v: f64| v.clamp(0.0, 1.0);
        [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
    }
}

pub fn colormaps() -> Registry<dyn Colormap> {
    let mut r: Registry<dyn Colormap> = Registry::new("colormap");
    r.register("gray", |p| Ok(Box::new(parse_params::<Gray>("gray", p)?)));
    r.register("hot", |p| Ok(Box::new(parse_params::<Hot>("hot", p)?)));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub bits: u8,
    pub log: bool,
    pub colormap: StrategySpec,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            bits: 8,
            log: true,
            colormap: StrategySpec::named("gray"),
        }
    }
}

/// Scale to `[0, 1]` by the image maximum: `v / max`, or with `log`
/// `ln(1 + v) / ln(1 + max)`. Negative values clamp to zero and an image
/// without positive values maps to zero.
pub fn tone_map(img: &Array2<f64>, log: bool) -> Array2<f64> {
    let max = img.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Array2::zeros(img.raw_dim());
    }
    if log {
        let denom = max.ln_1p();
        img.mapv(|v| v.max(0.0).ln_1p() / denom)
    } else {
        img.mapv(|v| v.max(0.0) / max)
    }
}

/// Quantize `t` in `[0, 1]` to an integer level at the given bit depth.
pub fn quantize(t: f64, bits: u8) -> u16 {
    let top = if bits == 8 { u8::MAX as f64 } else { u16::MAX as f64 };
    (t.clamp(0.0, 1.0) * top).round() as u16
}

fn save<P>(buf: ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    buf.save(path).map_err(|e| SrusError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Tone-map, colour and write `img` as PNG.
pub fn render_image(img: &Array2<f64>, opts: &RenderOptions, path: &Path) -> Result<()> {
    if opts.bits != 8 && opts.bits != 16 {
        return Err(SrusError::config(format!("bit depth must be 8 or 16, got {}", opts.bits)));
    }
    let cmap = colormaps().build(&opts.colormap)?;
    let t = tone_map(img, opts.log);
    let (h, w) = t.dim();
    let level = |x: u32, y: u32| t[[y as usize, x as usize]];
    match (cmap.is_gray(), opts.bits) {
        (true, 8) => save(
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize(level(x, y), 8) as u8])),
            path,
        ),
        (true, _) => save(
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize(level(x, y), 16)])),
            path,
        ),
        (false, 8) => save(
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb(cmap.rgb(level(x, y)).map(|c| quantize(c, 8) as u8))
            }),
            path,
        ),
        (false, _) => save(
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb(cmap.rgb(level(x, y)).map(|c| quantize(c, 16)))),
            path,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_map_zero_and_linear() {
        let z = Array2::<f64>::zeros((3, 4));
        assert!(tone_map(&z, true).iter().all(|&v| v == 0.0));
        let img = Array2::from_shape_vec((1, 3), vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(tone_map(&img, false).into_raw_vec_and_offset().0, vec![0.0, 0.5, 1.0]);
        let l = tone_map(&img, true);
        assert!((l[[0, 1]] - 3f64.ln() / 5f64.ln()).abs() < 1e-15);
        assert_eq!(l[[0, 2]], 1.0);
    }

    #[test]
    fn hot_endpoints() {
        let h = Hot {};
        assert_eq!(h.rgb(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(h.rgb(1.0), [1.0, 1.0, 1.0]);
        assert_eq!(h.rgb(1.0 / 3.0)[0], 1.0);
    }

    #[test]
    fn registry_and_quantize() {
        let r = colormaps();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["gray", "hot"]);
        assert!(r.build(&StrategySpec::named("viridis")).is_err());
        assert_eq!((quantize(1.0, 8), quantize(1.0, 16), quantize(0.5, 8)), (255, 65535, 128));
    }

    #[test]
    fn bad_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RenderOptions { bits: 12, ..RenderOptions::default() };
        assert!(render_image(&Array2::zeros((2, 2)), &opts, &dir.path().join("x.png")).is_err());
    }
}
