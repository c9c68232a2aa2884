use ndarray::Array2;
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_from, GridSpec, SimScene, SnrSpec};
use crate::error::{Result, SrusError};
use crate::stack::IqFrameStack;

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_4;

/// Separable Gaussian envelope with an axial carrier `exp(i 4 pi dz / lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfSpec {
    /// Lateral FWHM is `f_number * wavelength` unless overridden.
    pub f_number: f64,
    pub lateral_fwhm_um: Option<f64>,
    pub axial_fwhm_um: f64,
    /// Splat support half-width in standard deviations.
    pub support_sigmas: f64,
}

impl Default for PsfSpec {
    fn default() -> Self {
        Self {
            f_number: 1.0,
            lateral_fwhm_um: None,
            axial_fwhm_um: 77.0,
            support_sigmas: 3.5,
        }
    }
}

impl PsfSpec {
    pub fn lateral_sigma_um(&self, grid: &GridSpec) -> f64 {
        self.lateral_fwhm_um
            .unwrap_or(self.f_number * grid.wavelength_um)
            / FWHM_PER_SIGMA
    }

    pub fn axial_sigma_um(&self) -> f64 {
        self.axial_fwhm_um / FWHM_PER_SIGMA
    }

    /// Larger of the two half-widths at half maximum, in micrometres.
    pub fn half_width_um(&self, grid: &GridSpec) -> f64 {
        0.5 * FWHM_PER_SIGMA * self.lateral_sigma_um(grid).max(self.axial_sigma_um())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub psf: PsfSpec,
    /// Tissue-to-noise power ratio in dB; `None` disables additive noise.
    pub tissue_to_noise_db: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            psf: PsfSpec::default(),
            tissue_to_noise_db: Some(10.0),
        }
    }
}

/// Separately rendered parts of one frame. `mb` is scaled to the requested SNR.
#[derive(Debug, Clone)]
pub struct FrameComponents {
    pub tissue: Array2<Complex64>,
    pub noise: Array2<Complex64>,
    pub mb: Array2<Complex64>,
    pub mb_gain: f64,
}

impl FrameComponents {
    pub fn composite(&self) -> Array2<Complex64> {
        &self.tissue + &self.noise + &self.mb
    }

    pub fn background(&self) -> Array2<Complex64> {
        &self.tissue + &self.noise
    }
}

/// `20 log10(peak |mb| / rms |background|)`.
pub fn measure_snr_db(mb: &Array2<Complex64>, background: &Array2<Complex64>) -> f64 {
    let peak = mb.iter().map(|c| c.norm()).fold(0.0, f64::max);
    20.0 * (peak / rms(background)).log10()
}

fn rms(a: &Array2<Complex64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().map(|c| c.norm_sqr()).sum::<f64>() / a.len() as f64).sqrt()
}

/// Renders frames of one scene. The static tissue image is computed once.
pub struct FrameRenderer<'a> {
    scene: &'a SimScene,
    grid: GridSpec,
    sigma_x: f64,
    sigma_z: f64,
    support: f64,
    tissue: Array2<Complex64>,
    noise_rms: f64,
}

impl<'a> FrameRenderer<'a> {
    pub fn new(scene: &'a SimScene, grid: &GridSpec, cfg: &RenderConfig) -> Result<Self> {
        grid.validate()?;
        let sigma_x = cfg.psf.lateral_sigma_um(grid);
        let sigma_z = cfg.psf.axial_sigma_um();
        if !(sigma_x > 0.0 && sigma_z > 0.0 && cfg.psf.support_sigmas > 0.0) {
            return Err(SrusError::config("PSF widths must be positive"));
        }
        let mut r = Self {
            scene,
            grid: *grid,
            sigma_x,
            sigma_z,
            support: cfg.psf.support_sigmas,
            tissue: Array2::zeros((grid.height_px, grid.width_px)),
            noise_rms: 0.0,
        };
        let mut tissue = Array2::zeros((grid.height_px, grid.width_px));
        for s in &scene.tissue_scatterers {
            r.splat(&mut tissue, s.x_um, s.z_um, s.reflectivity);
        }
        let tissue_rms = rms(&tissue);
        r.noise_rms = match cfg.tissue_to_noise_db {
            None => 0.0,
            Some(tnr) if tissue_rms > 0.0 => tissue_rms * 10f64.powf(-tnr / 20.0),
            Some(_) => 1.0,
        };
        r.tissue = tissue;
        Ok(r)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn noise_rms(&self) -> f64 {
        self.noise_rms
    }

    /// Adds `amp * psf(x - xs, z - zs)` sampled at pixel centres.
    fn splat(&self, out: &mut Array2<Complex64>, xs: f64, zs: f64, amp: Complex64) {
        let p = self.grid.pitch_um;
        let (h, w) = out.dim();
        let rx = self.support * self.sigma_x;
        let rz = self.support * self.sigma_z;
        let j0 = ((xs - rx) / p - 0.5).floor().max(0.0) as usize;
        let j1 = (((xs + rx) / p - 0.5).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
        let i0 = ((zs - rz) / p - 0.5).floor().max(0.0) as usize;
        let i1 = (((zs + rz) / p - 0.5).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
        if j0 >= j1 || i0 >= i1 {
            return;
        }
        let k = 4.0 * std::f64::consts::PI / self.grid.wavelength_um;
        let lat: Vec<f64> = (j0..j1)
            .map(|j| {
                let dx = (j as f64 + 0.5) * p - xs;
                (-dx * dx / (2.0 * self.sigma_x * self.sigma_x)).exp()
            })
            .collect();
        for i in i0..i1 {
            let dz = (i as f64 + 0.5) * p - zs;
            let ax = amp
                * (-dz * dz / (2.0 * self.sigma_z * self.sigma_z)).exp()
                * Complex64::from_polar(1.0, k * dz);
            let mut row = out.row_mut(i);
            for (j, &l) in (j0..j1).zip(&lat) {
                row[j] += ax * l;
            }
        }
    }

    pub fn components(&self, frame_idx: usize, snr: SnrSpec, seed: u64) -> Result<FrameComponents> {
        if frame_idx >= self.scene.n_frames {
            return Err(SrusError::input(format!(
                "frame {frame_idx} beyond scene length {}",
                self.scene.n_frames
            )));
        }
        let dim = (self.grid.height_px, self.grid.width_px);
        let mut noise = Array2::zeros(dim);
        if self.noise_rms > 0.0 {
            let mut rng = rng_from(derive_seed(seed, &[frame_idx as u64]));
            let n = Normal::new(0.0, self.noise_rms * std::f64::consts::FRAC_1_SQRT_2).unwrap();
            noise.mapv_inplace(|_: Complex64| Complex64::new(n.sample(&mut rng), n.sample(&mut rng)));
        }
        let mut mb = Array2::zeros(dim);
        for (_, p, refl) in self.scene.mbs_at(frame_idx) {
            self.splat(&mut mb, p[0], p[1], Complex64::new(refl, 0.0));
        }
        // Calibrate so the brightest microbubble sits `snr` above the background RMS.
        let background_rms = rms(&(&self.tissue + &noise));
        let peak = mb.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let mb_gain = if background_rms > 0.0 && peak > 0.0 {
            snr.amplitude_ratio() * background_rms / peak
        } else {
            1.0
        };
        mb.mapv_inplace(|c| c * mb_gain);
        Ok(FrameComponents {
            tissue: self.tissue.clone(),
            noise,
            mb,
            mb_gain,
        })
    }

    pub fn render(&self, frame_idx: usize, snr: SnrSpec, seed: u64) -> Result<Array2<Complex64>> {
        Ok(self.components(frame_idx, snr, seed)?.composite())
    }
}

pub fn render_iq_frame(
    scene: &SimScene,
    frame_idx: usize,
    grid: &GridSpec,
    cfg: &RenderConfig,
    snr: SnrSpec,
    seed: u64,
) -> Result<Array2<Complex64>> {
    FrameRenderer::new(scene, grid, cfg)?.render(frame_idx, snr, seed)
}

/// All frames of a scene, noise seeded per frame from `seed`.
pub fn render_stack(
    scene: &SimScene,
    grid: &GridSpec,
    cfg: &RenderConfig,
    snr: SnrSpec,
    seed: u64,
) -> Result<IqFrameStack> {
    let r = FrameRenderer::new(scene, grid, cfg)?;
    let frames = (0..scene.n_frames)
        .map(|t| r.render(t, snr, seed))
        .collect::<Result<Vec<_>>>()?;
    IqFrameStack::from_frames(&frames, *grid)
}
