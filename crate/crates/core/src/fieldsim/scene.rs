use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_from, GridSpec};
use crate::error::{Result, SrusError};

pub const DIAMETER_MIN_UM: f64 = 100.0;
pub const DIAMETER_MAX_UM: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_vessels: usize,
    /// Branch vessels added on top of `n_vessels`, each splitting off a parent.
    pub bifurcations: usize,
    pub diameter_um: [f64; 2],
    pub speed_mm_s: [f64; 2],
    /// Expected number of microbubbles inside the field in any frame.
    pub mean_visible_mbs: f64,
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    /// Tissue scatterers per coarse pixel area.
    pub tissue_density: f64,
    /// Relative spread of per-track reflectivity, uniform in [1-j, 1+j].
    pub reflectivity_jitter: f64,
    /// Fraction of the local radius usable as lateral offset inside the lumen.
    pub lumen_fill: f64,
    pub vertices_per_vessel: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_vessels: 3,
            bifurcations: 1,
            diameter_um: [DIAMETER_MIN_UM, DIAMETER_MAX_UM],
            speed_mm_s: [1.0, 20.0],
            mean_visible_mbs: 15.0,
            n_frames: 9,
            frame_rate_hz: 500.0,
            tissue_density: 2.0,
            reflectivity_jitter: 0.0,
            lumen_fill: 0.8,
            vertices_per_vessel: 24,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vessels == 0 {
            return Err(SrusError::config("scene needs at least one vessel"));
        }
        let [dmin, dmax] = self.diameter_um;
        if !(DIAMETER_MIN_UM..=DIAMETER_MAX_UM).contains(&dmin)
            || !(DIAMETER_MIN_UM..=DIAMETER_MAX_UM).contains(&dmax)
            || dmin > dmax
        {
            return Err(SrusError::config(format!(
                "diameter range [{dmin}, {dmax}] must lie within [{DIAMETER_MIN_UM}, {DIAMETER_MAX_UM}] um"
            )));
        }
        let [vmin, vmax] = self.speed_mm_s;
        if !(vmin >= 0.0 && vmin <= vmax && vmax.is_finite()) {
            return Err(SrusError::config("speed range must satisfy 0 <= min <= max"));
        }
        if self.n_frames == 0 {
            return Err(SrusError::config("scene needs at least one frame"));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(SrusError::config("frame rate must be positive"));
        }
        if !(self.mean_visible_mbs >= 0.0) || !(self.tissue_density >= 0.0) {
            return Err(SrusError::config("densities must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.reflectivity_jitter) {
            return Err(SrusError::config("reflectivity_jitter must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lumen_fill) {
            return Err(SrusError::config("lumen_fill must be in [0, 1]"));
        }
        if self.vertices_per_vessel < 2 {
            return Err(SrusError::config("vessels need at least two vertices"));
        }
        Ok(())
    }
}

/// Polyline centerline with per-vertex lumen diameter. Points are `[x_um, z_um]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub centerline: Vec<[f64; 2]>,
    pub diameters_um: Vec<f64>,
    /// Index of the parent vessel for branches.
    pub parent: Option<usize>,
}

impl Vessel {
    fn cumulative_lengths(&self) -> Vec<f64> {
        let mut acc = vec![0.0];
        for w in self.centerline.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            acc.push(acc.last().unwrap() + d);
        }
        acc
    }

    pub fn length_um(&self) -> f64 {
        *self.cumulative_lengths().last().unwrap()
    }

    /// Point, unit normal and diameter at arclength `s` (clamped to the ends).
    pub fn frame_at(&self, s: f64) -> ([f64; 2], [f64; 2], f64) {
        let cum = self.cumulative_lengths();
        let total = *cum.last().unwrap();
        let s = s.clamp(0.0, total);
        let seg = match cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => cum.len() - 2,
        }
        .min(self.centerline.len() - 2);
        let (a, b) = (self.centerline[seg], self.centerline[seg + 1]);
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let (dx, dz) = if len > 0.0 {
            ((b[0] - a[0]) / len, (b[1] - a[1]) / len)
        } else {
            (1.0, 0.0)
        };
        let d = self.diameters_um[seg] + t * (self.diameters_um[seg + 1] - self.diameters_um[seg]);
        (p, [-dz, dx], d)
    }

    /// Distance from a point to the centerline and the lumen diameter at the closest point.
    pub fn distance_and_diameter(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let l2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if l2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / l2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d < best.0 {
                let diam = self.diameters_um[i] + t * (self.diameters_um[i + 1] - self.diameters_um[i]);
                best = (d, diam);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x_um: f64,
    pub z_um: f64,
    pub reflectivity: Complex64,
}

/// A microbubble visible over the contiguous frame span
/// `first_frame .. first_frame + positions.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbTrack {
    pub id: usize,
    pub vessel: usize,
    pub first_frame: usize,
    pub positions: Vec<[f64; 2]>,
    pub reflectivity: f64,
    pub speed_um_s: f64,
}

impl MbTrack {
    pub fn position_at(&self, frame: usize) -> Option<[f64; 2]> {
        frame
            .checked_sub(self.first_frame)
            .and_then(|i| self.positions.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScene {
    pub vessels: Vec<Vessel>,
    pub tissue_scatterers: Vec<Scatterer>,
    pub mb_tracks: Vec<MbTrack>,
    pub frame_rate_hz: f64,
    pub n_frames: usize,
}

impl SimScene {
    /// Microbubbles present at `frame`, in track order: `(track index, [x_um, z_um], reflectivity)`.
    pub fn mbs_at(&self, frame: usize) -> Vec<(usize, [f64; 2], f64)> {
        self.mb_tracks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.position_at(frame).map(|p| (i, p, t.reflectivity)))
            .collect()
    }

    pub fn mb_positions(&self, frame: usize) -> Vec<[f64; 2]> {
        self.mbs_at(frame).into_iter().map(|(_, p, _)| p).collect()
    }
}

const TAG_VESSELS: u64 = 1;
const TAG_TISSUE: u64 = 2;
const TAG_TRACKS: u64 = 3;

pub fn gen_scene(seed: u64, cfg: &SceneConfig, grid: &GridSpec) -> Result<SimScene> {
    cfg.validate()?;
    grid.validate()?;
    let (w, h) = (grid.field_width_um(), grid.field_height_um());
    if !(w > 0.0 && h > 0.0) {
        return Err(SrusError::config("empty field of view"));
    }

    let mut rng = rng_from(derive_seed(seed, &[TAG_VESSELS]));
    let mut vessels = Vec::with_capacity(cfg.n_vessels + cfg.bifurcations);
    for _ in 0..cfg.n_vessels {
        let a = random_edge_point(&mut rng, w, h, None);
        let b = random_edge_point(&mut rng, w, h, Some(a.1));
        vessels.push(wiggly_vessel(&mut rng, cfg, a.0, b.0, None, w, h));
    }
    for _ in 0..cfg.bifurcations {
        let parent = rng.random_range(0..cfg.n_vessels);
        let pv = &vessels[parent];
        let n = pv.centerline.len();
        let vi = rng.random_range((n * 3 / 10).max(1)..=(n * 6 / 10).max(1).min(n - 1));
        let start = pv.centerline[vi];
        let start_d = pv.diameters_um[vi];
        let (end, _) = random_edge_point(&mut rng, w, h, None);
        let mut branch = wiggly_vessel(&mut rng, cfg, start, end, Some(parent), w, h);
        branch.diameters_um[0] = branch.diameters_um[0].min(start_d);
        vessels.push(branch);
    }

    let mut rng = rng_from(derive_seed(seed, &[TAG_TISSUE]));
    let margin = 3.0 * grid.wavelength_um;
    let area_px = (w + 2.0 * margin) * (h + 2.0 * margin) / (grid.pitch_um * grid.pitch_um);
    let n_tissue = (cfg.tissue_density * area_px).round() as usize;
    let cn = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
    let tissue_scatterers = (0..n_tissue)
        .map(|_| Scatterer {
            x_um: rng.random_range(-margin..w + margin),
            z_um: rng.random_range(-margin..h + margin),
            reflectivity: Complex64::new(cn.sample(&mut rng), cn.sample(&mut rng)),
        })
        .collect();

    let mut rng = rng_from(derive_seed(seed, &[TAG_TRACKS]));
    let lengths: Vec<f64> = vessels.iter().map(Vessel::length_um).collect();
    let total_len: f64 = lengths.iter().sum();
    let density = if total_len > 0.0 {
        cfg.mean_visible_mbs / total_len
    } else {
        0.0
    };
    let [vmin, vmax] = cfg.speed_mm_s.map(|v| v * 1000.0);
    let duration_s = (cfg.n_frames - 1) as f64 / cfg.frame_rate_hz;
    let travel_max = vmax * duration_s;
    let mut mb_tracks = Vec::new();
    for (vi, (vessel, &len)) in vessels.iter().zip(&lengths).enumerate() {
        let lambda = density * (len + travel_max);
        let count = if lambda > 0.0 {
            Poisson::new(lambda).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let s0 = rng.random_range(-travel_max..=len);
            let speed = if vmax > vmin {
                rng.random_range(vmin..vmax)
            } else {
                vmin
            };
            let lateral = rng.random_range(-1.0..=1.0) * cfg.lumen_fill;
            let refl = 1.0 + cfg.reflectivity_jitter * rng.random_range(-1.0..=1.0);
            let mut first = None;
            let mut positions = Vec::new();
            for f in 0..cfg.n_frames {
                let s = s0 + speed * f as f64 / cfg.frame_rate_hz;
                if (0.0..=len).contains(&s) {
                    let (p, nrm, d) = vessel.frame_at(s);
                    let off = lateral * d / 2.0;
                    first.get_or_insert(f);
                    positions.push([p[0] + off * nrm[0], p[1] + off * nrm[1]]);
                } else if first.is_some() {
                    break;
                }
            }
            if let Some(first_frame) = first {
                mb_tracks.push(MbTrack {
                    id: mb_tracks.len(),
                    vessel: vi,
                    first_frame,
                    positions,
                    reflectivity: refl,
                    speed_um_s: speed,
                });
            }
        }
    }

    Ok(SimScene {
        vessels,
        tissue_scatterers,
        mb_tracks,
        frame_rate_hz: cfg.frame_rate_hz,
        n_frames: cfg.n_frames,
    })
}

/// A point on one of the four field edges; returns the point and the edge index.
fn random_edge_point<R: Rng>(rng: &mut R, w: f64, h: f64, avoid: Option<usize>) -> ([f64; 2], usize) {
    let edge = loop {
        let e = rng.random_range(0..4usize);
        if Some(e) != avoid {
            break e;
        }
    };
    let (u, v) = (rng.random_range(0.1..0.9), 0.0);
    let p = match edge {
        0 => [u * w, v],
        1 => [w, u * h],
        2 => [u * w, h],
        _ => [v, u * h],
    };
    (p, edge)
}

fn wiggly_vessel<R: Rng>(
    rng: &mut R,
    cfg: &SceneConfig,
    a: [f64; 2],
    b: [f64; 2],
    parent: Option<usize>,
    w: f64,
    h: f64,
) -> Vessel {
    let n = cfg.vertices_per_vessel;
    let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dz * dz).sqrt().max(1e-9);
    let nrm = [-dz / len, dx / len];
    let amp = rng.random_range(-0.12..0.12) * len;
    let phase = rng.random_range(0.0..std::f64::consts::PI);
    let [dmin, dmax] = cfg.diameter_um;
    let (d0, d1) = (rng.random_range(dmin..=dmax), rng.random_range(dmin..=dmax));
    let mut centerline = Vec::with_capacity(n);
    let mut diameters_um = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        // Endpoints stay fixed so branches remain attached to their parent.
        let bulge = amp * (std::f64::consts::PI * t).sin() * (phase + std::f64::consts::PI * t).cos();
        let x = (a[0] + t * dx + bulge * nrm[0]).clamp(0.0, w);
        let z = (a[1] + t * dz + bulge * nrm[1]).clamp(0.0, h);
        centerline.push([x, z]);
        diameters_um.push(d0 + t * (d1 - d0));
    }
    Vessel {
        centerline,
        diameters_um,
        parent,
    }
}
