//! Composite masked loss, SGD with momentum and L2 decay, and the epoch loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clutterfilt::{normalized_envelope, ClutterFilter, FilterConfig};
use crate::error::{Result, SrusError};
use crate::fieldsim::{derive_seed, label_path, rng_from, stack_path, DatasetManifest, LabelMap};
use crate::formats::{read_iqf, read_lbl};
use crate::network::{backward, forward_train, BatchOutput, NetConfig, NetOutput, NetParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_detect: f64,
    pub w_x: f64,
    pub w_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_detect: 0.9,
            w_x: 0.1,
            w_z: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("w_detect", self.w_detect), ("w_x", self.w_x), ("w_z", self.w_z)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SrusError::config(format!("{n} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Loss value split into its weighted-sum components (unweighted here).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub detect: f64,
    pub x: f64,
    pub z: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cross-entropy of one pixel's K logits against `target`; writes
/// `softmax - onehot` scaled by `scale` into `grad`.
fn cross_entropy(logits: &[f64], target: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (g, &v) in grad.iter_mut().zip(logits) {
        *g = scale * (v - lse).exp();
    }
    grad[target] -= scale;
    lse - logits[target]
}

/// Loss over a batch and its gradient with respect to the logits.
///
/// Detection BCE is averaged over every pixel of the batch; `pos_weight`
/// scales the positive term. Offset cross-entropies are averaged over
/// labelled pixels only and vanish when there are none.
pub fn loss_and_grad<F: Real>(
    out: &BatchOutput<F>,
    labels: &[&LabelMap],
    w: &LossWeights,
    pos_weight: f64,
) -> Result<(LossParts, Array2<F>)> {
    let g = out.geom;
    let k = out.k;
    if labels.len() != g.n {
        return Err(SrusError::shape(format!("{} label maps for a batch of {}", labels.len(), g.n)));
    }
    for l in labels {
        if l.dim() != (g.h, g.w) || l.k != k {
            return Err(SrusError::shape(format!(
                "labels {:?} with K={} do not match output {}x{} with K={k}",
                l.dim(),
                l.k,
                g.h,
                g.w
            )));
        }
    }
    let hw = g.hw();
    let n_pix = g.cols() as f64;
    let n_mb: usize = labels.iter().map(|l| l.count()).sum();
    let logits = out.logits.mapv(|v| v.to_f64().unwrap());
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());

    let mut detect = 0.0;
    let mut lx = 0.0;
    let mut lz = 0.0;
    let mut buf = vec![0.0; k];
    let mut gbuf = vec![0.0; k];
    let ce_scale = if n_mb > 0 { 1.0 / n_mb as f64 } else { 0.0 };
    for (n, lab) in labels.iter().enumerate() {
        for ((i, j), &d) in lab.detect.indexed_iter() {
            let col = n * hw + i * g.w + j;
            let s = logits[[0, col]];
            let p = crate::network::sigmoid(s);
            if d != 0 {
                detect += pos_weight * softplus(-s);
                grad[[0, col]] = w.w_detect * pos_weight * (p - 1.0) / n_pix;
                for (axis, target, acc, w_axis) in [
                    (0usize, lab.xbin[[i, j]] as usize, &mut lx, w.w_x),
                    (1, lab.zbin[[i, j]] as usize, &mut lz, w.w_z),
                ] {
                    let row0 = 1 + axis * k;
                    for (b, r) in buf.iter_mut().zip(row0..row0 + k) {
                        *b = logits[[r, col]];
                    }
                    *acc += cross_entropy(&buf, target, w_axis * ce_scale, &mut gbuf);
                    for (r, &gv) in (row0..row0 + k).zip(&gbuf) {
                        grad[[r, col]] = gv;
                    }
                }
            } else {
                detect += softplus(s);
                grad[[0, col]] = w.w_detect * p / n_pix;
            }
        }
    }
    let detect = detect / n_pix;
    let (lx, lz) = (lx * ce_scale, lz * ce_scale);
    let total = w.w_detect * detect + w.w_x * lx + w.w_z * lz;
    if !total.is_finite() {
        return Err(SrusError::numeric("loss is not finite"));
    }
    let parts = LossParts {
        total,
        detect,
        x: lx,
        z: lz,
    };
    Ok((parts, grad.mapv(|v| F::from_f64(v).unwrap())))
}

/// Weighted loss of one output against its labels (no positive reweighting).
pub fn composite_loss<F: Real>(out: &NetOutput<F>, labels: &LabelMap, w: &LossWeights) -> Result<f64> {
    Ok(loss_and_grad(&BatchOutput::from_sample(out), &[labels], w, 1.0)?.0.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SrusError::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SrusError::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SrusError::config("weight_decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(SrusError::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(SrusError::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
pub struct SgdState<F> {
    pub velocity: NetParams<F>,
}

impl<F: Real> SgdState<F> {
    pub fn new(params: &NetParams<F>) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

/// `v = momentum*v + g + decay*p; p -= lr*v`. Only kernels are decayed;
/// running statistics are left alone.
pub fn sgd_step<F: Real>(params: &mut NetParams<F>, grads: &NetParams<F>, state: &mut SgdState<F>, cfg: &OptimConfig) {
    let lr = F::from_f64(cfg.lr).unwrap();
    let mu = F::from_f64(cfg.momentum).unwrap();
    let wd = F::from_f64(cfg.weight_decay).unwrap();
    let grads = grads.tensors();
    let vel = state.velocity.tensors_mut();
    for (((_, kind, mut p), (_, _, g)), (_, _, mut v)) in params.tensors_mut().into_iter().zip(grads).zip(vel) {
        if !kind.trainable() {
            continue;
        }
        let decay = if kind.decayed() { wd } else { F::zero() };
        ndarray::Zip::from(&mut p).and(&g).and(&mut v).for_each(|p, &g, v| {
            *v = mu * *v + g + decay * *p;
            *p -= lr * *v;
        });
    }
}

/// One network input with its labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `[m][H][W]` normalized envelope.
    pub input: Array3<f32>,
    pub labels: LabelMap,
}

/// Indices of the `m` frames centred on `center`.
pub fn center_window(frames: usize, center: usize, m: usize) -> Result<std::ops::Range<usize>> {
    if m % 2 == 0 {
        return Err(SrusError::config(format!("m must be odd, got {m}")));
    }
    let half = (m - 1) / 2;
    if center < half || center + half >= frames {
        return Err(SrusError::config(format!(
            "m={m} does not fit around frame {center} of a {frames}-frame stack"
        )));
    }
    Ok(center - half..center + half + 1)
}

/// Load a dataset directory as training samples with `m` frames each.
/// Stacks are clutter-filtered unless the manifest says this was done.
pub fn load_samples(dir: &Path, m: usize, filter: &FilterConfig) -> Result<(DatasetManifest, Vec<TrainSample>)> {
    let manifest = DatasetManifest::load(dir)?;
    let grid = manifest.grid();
    let range = center_window(manifest.frames_per_stack, manifest.label_frame, m)?;
    let filt = if manifest.clutter_filtered {
        None
    } else {
        Some(ClutterFilter::from_config(filter)?)
    };
    let samples = manifest
        .stacks
        .par_iter()
        .map(|rec| {
            let stack = read_iqf(&stack_path(dir, rec.index), &grid)?;
            let labels = read_lbl(&label_path(dir, rec.index))?;
            let env = normalized_envelope(&stack, filt.as_ref())
                .map_err(|e| SrusError::Frame { frame: rec.index, source: Box::new(e) })?;
            Ok(TrainSample {
                input: env.slice(s![range.clone(), .., ..]).to_owned(),
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossWeights,
    /// Multiplier on the positive detection term; 1 means unweighted.
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(SrusError::config("pos_weight must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_detect: f64,
    pub loss_x: f64,
    pub loss_z: f64,
    pub wall_ms: f64,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    net: &'a NetConfig,
    train: &'a TrainConfig,
    samples: usize,
    height: usize,
    width: usize,
}

fn check_samples(samples: &[TrainSample], net: &NetConfig) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| SrusError::input("training set is empty"))?;
    let (m, h, w) = first.input.dim();
    if m != net.m {
        return Err(SrusError::config(format!(
            "network expects m={} input frames but samples carry m={m}",
            net.m
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.input.dim() != (m, h, w) || s.labels.dim() != (h, w) {
            return Err(SrusError::shape(format!("sample {i} does not share the grid of sample 0")));
        }
        if s.labels.k != net.k_bins {
            return Err(SrusError::config(format!(
                "sample {i} has K={} labels, network has k_bins={}",
                s.labels.k, net.k_bins
            )));
        }
    }
    Ok((h, w))
}

/// Sample order for an epoch, derived only from the seed and epoch number.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, &[0x5348_5546, epoch as u64])));
    order
}

/// Run one optimizer step on a batch; returns the pre-step loss.
pub fn train_step<F: Real>(
    params: &mut NetParams<F>,
    state: &mut SgdState<F>,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let (m, h, w) = batch[0].input.dim();
    let mut input = ndarray::Array4::<F>::zeros((batch.len(), m, h, w));
    for (mut dst, s) in input.axis_iter_mut(Axis(0)).zip(batch) {
        dst.zip_mut_with(&s.input, |d, &v| *d = F::from_f32(v).unwrap());
    }
    let labels: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
    let (out, cache) = forward_train(params, input.view())?;
    let (parts, dlogits) = loss_and_grad(&out, &labels, &cfg.loss, cfg.pos_weight)?;
    let grads = backward(params, &cache, dlogits.view());
    cache.update_running_stats(params);
    sgd_step(params, &grads, state, &cfg.optim);
    if !params.is_finite() {
        return Err(SrusError::numeric("parameters diverged to non-finite values"));
    }
    Ok(parts)
}

/// Train from a fresh initialization. Writes a JSON header line then one
/// [`EpochRecord`] per line to `log`.
pub fn train(
    samples: &[TrainSample],
    net: &NetConfig,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(NetParams<f32>, Vec<EpochRecord>)> {
    net.validate()?;
    cfg.validate()?;
    let (h, w) = check_samples(samples, net)?;
    let io = |e: std::io::Error| SrusError::io("training log", e);
    let header = LogHeader {
        net,
        train: cfg,
        samples: samples.len(),
        height: h,
        width: w,
    };
    writeln!(log, "{}", serde_json::json!({ "header": header })).map_err(io)?;

    let mut params = NetParams::<f32>::init(net, cfg.optim.seed)?;
    let mut state = SgdState::new(&params);
    let mut records = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let start = Instant::now();
        let order = epoch_order(samples.len(), cfg.optim.seed, epoch);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let p = train_step(&mut params, &mut state, &batch, cfg)?;
            let nb = chunk.len() as f64;
            sum.total += p.total * nb;
            sum.detect += p.detect * nb;
            sum.x += p.x * nb;
            sum.z += p.z * nb;
        }
        let n = samples.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss: sum.total / n,
            loss_detect: sum.detect / n,
            loss_x: sum.x / n,
            loss_z: sum.z / n,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
        records.push(rec);
    }
    Ok((params, records))
}
