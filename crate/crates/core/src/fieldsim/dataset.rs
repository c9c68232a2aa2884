use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    augment, default_snr_levels, derive_seed, encode_labels, gen_scene, render_stack, rng_from,
    transform_points, AugmentOp, GridSpec, LabelMap, RenderConfig, SceneConfig, SnrSpec,
};
use crate::error::{Result, SrusError};
use crate::formats::{read_json, write_iqf, write_json, write_lbl, FramePoints, PointSet};
use crate::stack::IqFrameStack;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "srus-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSplit {
    Train,
    /// Held-out set; every set index draws its own vessel morphologies.
    Test { set: u32 },
}

impl DatasetSplit {
    fn tags(&self) -> [u64; 2] {
        match *self {
            DatasetSplit::Train => [0x7472_6169_6e00, 0],
            DatasetSplit::Test { set } => [0x7465_7374_0000, set as u64 + 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub snr_levels: Vec<f64>,
    pub count: usize,
    pub seed: u64,
    pub split: DatasetSplit,
    /// Fraction of stacks mirrored laterally.
    pub hflip_fraction: f64,
    /// Scenes are rendered this many pixels larger on each axis and randomly
    /// cropped back to the grid size, so every stack keeps the network input size.
    pub crop_margin_px: usize,
    /// Accept SNR levels outside the simulated range.
    pub allow_any_snr: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
            snr_levels: default_snr_levels(),
            count: 12,
            seed: 0,
            split: DatasetSplit::Train,
            hflip_fraction: 0.5,
            crop_margin_px: 0,
            allow_any_snr: false,
        }
    }
}

impl DatasetConfig {
    /// Training set at the published scale: 12,000 images over three SNR levels.
    pub fn paper_scale_train() -> Self {
        Self {
            count: 12_000,
            ..Self::default()
        }
    }

    /// One of the five published held-out sets of 2,000 images.
    pub fn paper_scale_test(set: u32) -> Self {
        Self {
            count: 2_000,
            split: DatasetSplit::Test { set },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scene.validate()?;
        if self.snr_levels.is_empty() {
            return Err(SrusError::config("at least one SNR level is required"));
        }
        if !self.allow_any_snr {
            for &s in &self.snr_levels {
                SnrSpec::new(s)?;
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_fraction) {
            return Err(SrusError::config("hflip_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// Index of the frame the labels describe.
    pub fn label_frame(&self) -> usize {
        (self.scene.n_frames - 1) / 2
    }

    /// Number of stacks at each SNR level (round-robin assignment).
    pub fn per_level_counts(&self) -> Vec<usize> {
        let n = self.snr_levels.len();
        (0..n).map(|l| (self.count + n - 1 - l) / n).collect()
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        let [a, b] = self.split.tags();
        derive_seed(self.seed, &[a, b, index as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackRecord {
    pub index: usize,
    pub snr_db: f64,
    pub scene_seed: u64,
    pub hflip: bool,
    pub crop_origin: [usize; 2],
    pub label_count: usize,
    pub skipped_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: DatasetConfig,
    pub count: usize,
    pub per_level_counts: Vec<usize>,
    pub frames_per_stack: usize,
    pub label_frame: usize,
    pub clutter_filtered: bool,
    pub crop_policy: String,
    pub stacks: Vec<StackRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = read_json(&dir.join(MANIFEST_NAME))?;
        if m.format != DATASET_FORMAT {
            return Err(SrusError::format(
                dir.join(MANIFEST_NAME),
                format!("unsupported dataset format `{}`", m.format),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_NAME), self)
    }

    pub fn grid(&self) -> GridSpec {
        self.config.grid
    }
}

pub fn stack_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("stack_{index:06}.iqf"))
}

pub fn label_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("stack_{index:06}.lbl"))
}

/// Ground-truth positions for every frame of a stack.
pub fn truth_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("stack_{index:06}.truth.json"))
}

struct Sample {
    stack: IqFrameStack,
    labels: LabelMap,
    truth: PointSet,
    record: StackRecord,
}

const TAG_NOISE: u64 = 0x6e6f_6973_65;
const TAG_AUG: u64 = 0x6175_67;

fn make_sample(cfg: &DatasetConfig, index: usize) -> Result<Sample> {
    let levels = &cfg.snr_levels;
    let snr_db = levels[index % levels.len()];
    let scene_seed = cfg.scene_seed(index);
    let margin = cfg.crop_margin_px;
    let canvas = GridSpec {
        width_px: cfg.grid.width_px + margin,
        height_px: cfg.grid.height_px + margin,
        ..cfg.grid
    };
    let scene = gen_scene(scene_seed, &cfg.scene, &canvas)?;
    let snr = SnrSpec::unchecked(snr_db);
    let stack = render_stack(&scene, &canvas, &cfg.render, snr, derive_seed(scene_seed, &[TAG_NOISE]))?;

    let mut rng = rng_from(derive_seed(scene_seed, &[TAG_AUG]));
    let crop_origin = [rng.random_range(0..=margin), rng.random_range(0..=margin)];
    let hflip = rng.random_bool(cfg.hflip_fraction);
    let mut ops = vec![AugmentOp::Crop {
        top: crop_origin[0],
        left: crop_origin[1],
        height: cfg.grid.height_px,
        width: cfg.grid.width_px,
    }];
    if hflip {
        ops.push(AugmentOp::HFlip);
    }

    let label_frame = cfg.label_frame();
    let (mut labels, _) = encode_labels(&scene.mb_positions(label_frame), &canvas);
    let mut stack = stack;
    let mut per_frame: Vec<Vec<[f64; 2]>> = (0..scene.n_frames).map(|t| scene.mb_positions(t)).collect();
    let mut grid = canvas;
    for &op in &ops {
        let (s, l) = augment(&stack, &labels, op)?;
        stack = s;
        labels = l;
        for pts in per_frame.iter_mut() {
            *pts = transform_points(pts, &grid, op)?.0;
        }
        grid = stack.grid;
    }
    let in_field = scene.mb_positions(label_frame).len();
    let label_count = labels.count();
    let truth = PointSet {
        frames: per_frame
            .into_iter()
            .enumerate()
            .map(|(frame, points)| FramePoints { frame, points })
            .collect(),
    };
    Ok(Sample {
        stack,
        labels,
        record: StackRecord {
            index,
            snr_db,
            scene_seed,
            hflip,
            crop_origin,
            label_count,
            skipped_labels: in_field.saturating_sub(label_count),
        },
        truth,
    })
}

/// Simulate, augment and write a labelled dataset. Stacks are rendered in
/// parallel; each depends only on `(seed, split, index)`, so output is
/// byte-identical for any worker count.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path, overwrite: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| SrusError::io(out, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(SrusError::input(format!(
                "output directory {} is not empty (pass overwrite to replace)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| SrusError::io(out, e))?;

    const CHUNK: usize = 64;
    let mut stacks = Vec::with_capacity(cfg.count);
    for start in (0..cfg.count).step_by(CHUNK) {
        let end = (start + CHUNK).min(cfg.count);
        let samples = (start..end)
            .into_par_iter()
            .map(|i| make_sample(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        for s in samples {
            let i = s.record.index;
            write_iqf(&stack_path(out, i), &s.stack)?;
            write_lbl(&label_path(out, i), &s.labels)?;
            write_json(&truth_path(out, i), &s.truth)?;
            stacks.push(s.record);
        }
    }

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        config: cfg.clone(),
        count: cfg.count,
        per_level_counts: cfg.per_level_counts(),
        frames_per_stack: cfg.scene.n_frames,
        label_frame: cfg.label_frame(),
        clutter_filtered: false,
        crop_policy: format!(
            "render {}x{} canvas, random crop back to {}x{}",
            cfg.grid.height_px + cfg.crop_margin_px,
            cfg.grid.width_px + cfg.crop_margin_px,
            cfg.grid.height_px,
            cfg.grid.width_px
        ),
        stacks,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Render a single in-memory sample without touching the filesystem.
pub fn simulate_sample(cfg: &DatasetConfig, index: usize) -> Result<(IqFrameStack, LabelMap, PointSet)> {
    let s = make_sample(cfg, index)?;
    Ok((s.stack, s.labels, s.truth))
}
