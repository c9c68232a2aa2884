//! Synthetic contrast-enhanced ultrasound data.
//!
//! Scenes hold vessel centerlines, static tissue scatterers and microbubble
//! tracks in micrometres. Frames are rendered as complex IQ by splatting a
//! separable Gaussian-envelope PSF with an axial carrier, then adding complex
//! white noise. Ground truth is encoded per coarse pixel as a detection flag
//! plus a 1-of-K offset bin on each axis.

mod augment;
mod dataset;
mod labels;
mod render;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrusError};

pub use augment::{augment, transform_points, AugmentOp};
pub use dataset::{
    build_dataset, label_path, simulate_sample, stack_path, truth_path, DatasetConfig,
    DatasetManifest, DatasetSplit, StackRecord, MANIFEST_NAME,
};
pub use labels::{encode_labels, LabelMap};
pub use render::{
    measure_snr_db, render_iq_frame, render_stack, FrameComponents, FrameRenderer, PsfSpec,
    RenderConfig,
};
pub use scene::{gen_scene, MbTrack, SceneConfig, Scatterer, SimScene, Vessel};

/// Coarse pixel lattice of the network input and the K-fold offset grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_um: f64,
    pub wavelength_um: f64,
    pub upsample_k: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width_px: 228,
            height_px: 228,
            pitch_um: 51.5,
            wavelength_um: 103.0,
            upsample_k: 4,
        }
    }
}

impl GridSpec {
    pub fn with_size(width_px: usize, height_px: usize) -> Self {
        Self {
            width_px,
            height_px,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px < 16 || self.height_px < 16 {
            return Err(SrusError::config(format!(
                "grid must be at least 16x16 pixels, got {}x{}",
                self.height_px, self.width_px
            )));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(SrusError::config("pitch_um must be positive"));
        }
        if !(self.wavelength_um > 0.0 && self.wavelength_um.is_finite()) {
            return Err(SrusError::config("wavelength_um must be positive"));
        }
        if self.upsample_k < 2 || self.upsample_k > 255 {
            return Err(SrusError::config(format!(
                "upsample_k must be in [2, 255], got {}",
                self.upsample_k
            )));
        }
        Ok(())
    }

    pub fn field_width_um(&self) -> f64 {
        self.width_px as f64 * self.pitch_um
    }

    pub fn field_height_um(&self) -> f64 {
        self.height_px as f64 * self.pitch_um
    }

    pub fn contains(&self, x_um: f64, z_um: f64) -> bool {
        x_um >= 0.0
            && z_um >= 0.0
            && x_um < self.field_width_um()
            && z_um < self.field_height_um()
    }

    /// Fine-grid pixel pitch.
    pub fn fine_pitch_um(&self) -> f64 {
        self.pitch_um / self.upsample_k as f64
    }
}

pub const SNR_MIN_DB: f64 = 1.5;
pub const SNR_MAX_DB: f64 = 5.2;

/// Requested microbubble-to-background ratio in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub snr_db: f64,
}

impl SnrSpec {
    pub fn new(snr_db: f64) -> Result<Self> {
        if !(SNR_MIN_DB..=SNR_MAX_DB).contains(&snr_db) {
            return Err(SrusError::config(format!(
                "SNR {snr_db} dB outside [{SNR_MIN_DB}, {SNR_MAX_DB}]; use SnrSpec::unchecked to override"
            )));
        }
        Ok(Self { snr_db })
    }

    pub fn unchecked(snr_db: f64) -> Self {
        Self { snr_db }
    }

    pub fn amplitude_ratio(&self) -> f64 {
        10f64.powf(self.snr_db / 20.0)
    }
}

/// Default three-level SNR set: both ends of the simulated range plus the midpoint.
pub fn default_snr_levels() -> Vec<f64> {
    vec![1.5, 3.3, 5.2]
}

/// Deterministic sub-seed from a master seed and a path of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5EED_5EED_5EED_5EED);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
