use ndarray::{Array1, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::Uniform;

use super::{NetConfig, Real};
use crate::error::{Result, SrusError};
use crate::fieldsim::derive_seed;

/// Role of a tensor, which decides weight decay and whether it is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    fn identity(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F> {
    /// `[C][1][k][k]`
    pub dw: Array4<F>,
    pub bn1: BatchNorm<F>,
    /// `[hidden][C][1][1]`
    pub up: Array4<F>,
    pub bn2: BatchNorm<F>,
    /// `[C][hidden][1][1]`
    pub down: Array4<F>,
    pub bn3: BatchNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F> {
    /// `[out][C][1][1]`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<F> {
    pub cfg: NetConfig,
    /// `[C][m][k][k]`
    pub stem: Array4<F>,
    pub stem_bn: BatchNorm<F>,
    pub blocks: Vec<ConvBlock<F>>,
    pub detect: Decoder<F>,
    pub xoff: Decoder<F>,
    pub zoff: Decoder<F>,
}

impl<F: Real> NetParams<F> {
    /// Parameters with every trainable tensor zero and identity batch norm.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, h, k) = (cfg.stem_ch, cfg.hidden_ch, cfg.k_bins);
        let dec = |out: usize| Decoder {
            weight: Array4::zeros((out, c, 1, 1)),
            bias: Array1::zeros(out),
        };
        Ok(Self {
            cfg: *cfg,
            stem: Array4::zeros((c, cfg.m, cfg.stem_kernel, cfg.stem_kernel)),
            stem_bn: BatchNorm::identity(c),
            blocks: (0..cfg.n_blocks)
                .map(|_| ConvBlock {
                    dw: Array4::zeros((c, 1, cfg.dw_kernel, cfg.dw_kernel)),
                    bn1: BatchNorm::identity(c),
                    up: Array4::zeros((h, c, 1, 1)),
                    bn2: BatchNorm::identity(h),
                    down: Array4::zeros((c, h, 1, 1)),
                    bn3: BatchNorm::identity(c),
                })
                .collect(),
            detect: dec(1),
            xoff: dec(k),
            zoff: dec(k),
        })
    }

    /// Kernels uniform in `±sqrt(6 / fan_in)` (decoders `±1/sqrt(C)`), biases
    /// zero, identity batch norm. Each tensor draws from its own seeded stream.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let c = cfg.stem_ch as f64;
        for (idx, (name, kind, mut t)) in p.tensors_mut().into_iter().enumerate() {
            if kind != ParamKind::Weight {
                continue;
            }
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = if name.ends_with("off.weight") || name.starts_with("detect") {
                1.0 / c.sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = crate::fieldsim::rng_from(derive_seed(seed, &[0x4E45_54, idx as u64]));
            t.mapv_inplace(|_| F::from_f64(rng.sample(dist)).unwrap());
        }
        Ok(p)
    }

    /// Every tensor in checkpoint order with its name and role.
    pub fn tensors(&self) -> Vec<(String, ParamKind, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        visit_ref(self, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        visit_mut(self, &mut out);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, k, _)| k.trainable())
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Shape, finiteness and positive running variance.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let reference = Self::zeros(&self.cfg)?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        if mine.len() != theirs.len() {
            return Err(SrusError::shape("tensor count does not match the configuration"));
        }
        for ((name, _, t), (_, _, r)) in mine.iter().zip(theirs.iter()) {
            if t.shape() != r.shape() {
                return Err(SrusError::shape(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(SrusError::numeric(format!("{name} has non-finite values")));
            }
            if name.ends_with("running_var") && !t.iter().all(|v| *v > F::zero()) {
                return Err(SrusError::numeric(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Convert to another scalar type.
    pub fn cast<G: Real>(&self) -> NetParams<G> {
        let mut out = NetParams::<G>::zeros(&self.cfg).expect("validated config");
        for ((_, _, src), (_, _, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, s| *d = G::from_f64(s.to_f64().unwrap()).unwrap());
        }
        out
    }

    /// Same shapes, all values zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.cfg).expect("validated config");
        for (_, _, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }
}

fn push_bn_ref<'a, F>(out: &mut Vec<(String, ParamKind, ArrayViewD<'a, F>)>, prefix: &str, bn: &'a BatchNorm<F>) {
    out.push((format!("{prefix}.gamma"), ParamKind::BnScale, bn.gamma.view().into_dyn()));
    out.push((format!("{prefix}.beta"), ParamKind::BnShift, bn.beta.view().into_dyn()));
    out.push((format!("{prefix}.running_mean"), ParamKind::RunningStat, bn.running_mean.view().into_dyn()));
    out.push((format!("{prefix}.running_var"), ParamKind::RunningStat, bn.running_var.view().into_dyn()));
}

fn visit_ref<'a, F>(p: &'a NetParams<F>, out: &mut Vec<(String, ParamKind, ArrayViewD<'a, F>)>) {
    out.push(("stem.weight".into(), ParamKind::Weight, p.stem.view().into_dyn()));
    push_bn_ref(out, "stem.bn", &p.stem_bn);
    for (i, b) in p.blocks.iter().enumerate() {
        out.push((format!("blocks.{i}.dw.weight"), ParamKind::Weight, b.dw.view().into_dyn()));
        push_bn_ref(out, &format!("blocks.{i}.bn1"), &b.bn1);
        out.push((format!("blocks.{i}.up.weight"), ParamKind::Weight, b.up.view().into_dyn()));
        push_bn_ref(out, &format!("blocks.{i}.bn2"), &b.bn2);
        out.push((format!("blocks.{i}.down.weight"), ParamKind::Weight, b.down.view().into_dyn()));
        push_bn_ref(out, &format!("blocks.{i}.bn3"), &b.bn3);
    }
    for (name, d) in [("detect", &p.detect), ("xoff", &p.xoff), ("zoff", &p.zoff)] {
        out.push((format!("{name}.weight"), ParamKind::Weight, d.weight.view().into_dyn()));
        out.push((format!("{name}.bias"), ParamKind::Bias, d.bias.view().into_dyn()));
    }
}

fn push_bn_mut<'a, F>(out: &mut Vec<(String, ParamKind, ArrayViewMutD<'a, F>)>, prefix: &str, bn: &'a mut BatchNorm<F>) {
    out.push((format!("{prefix}.gamma"), ParamKind::BnScale, bn.gamma.view_mut().into_dyn()));
    out.push((format!("{prefix}.beta"), ParamKind::BnShift, bn.beta.view_mut().into_dyn()));
    out.push((format!("{prefix}.running_mean"), ParamKind::RunningStat, bn.running_mean.view_mut().into_dyn()));
    out.push((format!("{prefix}.running_var"), ParamKind::RunningStat, bn.running_var.view_mut().into_dyn()));
}

fn visit_mut<'a, F>(p: &'a mut NetParams<F>, out: &mut Vec<(String, ParamKind, ArrayViewMutD<'a, F>)>) {
    out.push(("stem.weight".into(), ParamKind::Weight, p.stem.view_mut().into_dyn()));
    push_bn_mut(out, "stem.bn", &mut p.stem_bn);
    for (i, b) in p.blocks.iter_mut().enumerate() {
        out.push((format!("blocks.{i}.dw.weight"), ParamKind::Weight, b.dw.view_mut().into_dyn()));
        push_bn_mut(out, &format!("blocks.{i}.bn1"), &mut b.bn1);
        out.push((format!("blocks.{i}.up.weight"), ParamKind::Weight, b.up.view_mut().into_dyn()));
        push_bn_mut(out, &format!("blocks.{i}.bn2"), &mut b.bn2);
        out.push((format!("blocks.{i}.down.weight"), ParamKind::Weight, b.down.view_mut().into_dyn()));
        push_bn_mut(out, &format!("blocks.{i}.bn3"), &mut b.bn3);
    }
    for (name, d) in [("detect", &mut p.detect), ("xoff", &mut p.xoff), ("zoff", &mut p.zoff)] {
        out.push((format!("{name}.weight"), ParamKind::Weight, d.weight.view_mut().into_dyn()));
        out.push((format!("{name}.bias"), ParamKind::Bias, d.bias.view_mut().into_dyn()));
    }
}
