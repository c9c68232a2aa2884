use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::layers::{
    bn_gelu_backward, bn_gelu_eval, bn_gelu_recompute, bn_gelu_train, dwconv_backward, dwconv_forward, im2col, BnCache,
    Geom,
};
use super::{BatchNorm, NetParams, Real};
use crate::error::{Result, SrusError};

/// Logits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<F> {
    /// `[H][W]`
    pub detect_logit: Array2<F>,
    /// `[K][H][W]`
    pub xoff_logits: Array3<F>,
    /// `[K][H][W]`
    pub zoff_logits: Array3<F>,
}

/// Logits for a batch, channel-major: row 0 is detection, rows `1..=K` the
/// x bins and rows `K+1..=2K` the z bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<F> {
    pub logits: Array2<F>,
    pub geom: Geom,
    pub k: usize,
}

impl<F: Real> BatchOutput<F> {
    pub fn sample(&self, n: usize) -> NetOutput<F> {
        let (h, w, k) = (self.geom.h, self.geom.w, self.k);
        let hw = self.geom.hw();
        let cols = self.logits.slice(s![.., n * hw..(n + 1) * hw]);
        let plane = |rows: std::ops::Range<usize>| {
            cols.slice(s![rows.clone(), ..])
                .to_owned()
                .into_shape_with_order((rows.len(), h, w))
                .expect("contiguous slice")
        };
        NetOutput {
            detect_logit: plane(0..1).index_axis_move(Axis(0), 0),
            xoff_logits: plane(1..1 + k),
            zoff_logits: plane(1 + k..1 + 2 * k),
        }
    }

    /// Rebuild a single-sample batch from per-image logits.
    pub fn from_sample(out: &NetOutput<F>) -> Self {
        let (h, w) = out.detect_logit.dim();
        let k = out.xoff_logits.dim().0;
        let d = out.detect_logit.view().into_shape_with_order((1, h * w)).expect("contiguous");
        let x = out.xoff_logits.view().into_shape_with_order((k, h * w)).expect("contiguous");
        let z = out.zoff_logits.view().into_shape_with_order((k, h * w)).expect("contiguous");
        Self {
            logits: concatenate(Axis(0), &[d, x, z]).expect("matching widths"),
            geom: Geom { n: 1, h, w },
            k,
        }
    }
}

struct BlockCache<F> {
    x0: Array2<F>,
    bn1: BnCache<F>,
    bn2: BnCache<F>,
    bn3: BnCache<F>,
}

/// Activations retained by a training forward pass.
pub struct TrainCache<F> {
    geom: Geom,
    col: Array2<F>,
    stem_bn: BnCache<F>,
    blocks: Vec<BlockCache<F>>,
    feat: Array2<F>,
}

impl<F: Real> TrainCache<F> {
    pub fn geom(&self) -> Geom {
        self.geom
    }
}

/// View a `[out][in][kh][kw]` kernel as `[out][in*kh*kw]`.
fn mat<F: Real>(a: &ndarray::Array4<F>) -> ArrayView2<'_, F> {
    let (o, i, kh, kw) = a.dim();
    a.view().into_shape_with_order((o, i * kh * kw)).expect("standard layout")
}

fn dw_kernel<F: Real>(a: &ndarray::Array4<F>) -> ArrayView3<'_, F> {
    a.index_axis(Axis(1), 0)
}

fn heads<F: Real>(p: &NetParams<F>) -> (Array2<F>, Array1<F>) {
    let w = concatenate(Axis(0), &[mat(&p.detect.weight), mat(&p.xoff.weight), mat(&p.zoff.weight)])
        .expect("decoder widths agree");
    let b = concatenate(Axis(0), &[p.detect.bias.view(), p.xoff.bias.view(), p.zoff.bias.view()])
        .expect("1-d");
    (w, b)
}

fn apply_heads<F: Real>(p: &NetParams<F>, feat: &Array2<F>) -> Array2<F> {
    let (w, b) = heads(p);
    let mut logits = w.dot(feat);
    for (mut row, &bv) in logits.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bv);
    }
    logits
}

fn check_input<F: Real>(p: &NetParams<F>, input: &ArrayView4<'_, F>) -> Result<Geom> {
    let (n, m, h, w) = input.dim();
    let cfg = &p.cfg;
    if m != cfg.m {
        return Err(SrusError::shape(format!("input has {m} frames, network expects {}", cfg.m)));
    }
    if n == 0 {
        return Err(SrusError::shape("empty batch"));
    }
    if h < cfg.dw_kernel || w < cfg.dw_kernel {
        return Err(SrusError::shape(format!(
            "input {h}x{w} smaller than the {}x{} kernel",
            cfg.dw_kernel, cfg.dw_kernel
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(SrusError::input("input contains non-finite values"));
    }
    Ok(Geom { n, h, w })
}

fn eps<F: Real>(p: &NetParams<F>) -> F {
    F::from_f64(p.cfg.bn_eps).unwrap()
}

/// Training-mode forward on `[N][m][H][W]` using batch statistics.
///
/// Running statistics are not touched here; call
/// [`TrainCache::update_running_stats`] once per optimizer step.
pub fn forward_train<F: Real>(p: &NetParams<F>, input: ArrayView4<'_, F>) -> Result<(BatchOutput<F>, TrainCache<F>)> {
    let g = check_input(p, &input)?;
    let eps = eps(p);
    let col = im2col(input, p.cfg.stem_kernel);
    let a0 = mat(&p.stem).dot(&col);
    let (mut x, stem_bn) = bn_gelu_train(a0, p.stem_bn.gamma.view(), p.stem_bn.beta.view(), eps);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let a1 = dwconv_forward(x.view(), dw_kernel(&b.dw), g);
        let (g1, bn1) = bn_gelu_train(a1, b.bn1.gamma.view(), b.bn1.beta.view(), eps);
        let a2 = mat(&b.up).dot(&g1);
        drop(g1);
        let (g2, bn2) = bn_gelu_train(a2, b.bn2.gamma.view(), b.bn2.beta.view(), eps);
        let a3 = mat(&b.down).dot(&g2);
        drop(g2);
        let (g3, bn3) = bn_gelu_train(a3, b.bn3.gamma.view(), b.bn3.beta.view(), eps);
        let y = &x + &g3;
        blocks.push(BlockCache { x0: x, bn1, bn2, bn3 });
        x = y;
    }
    let logits = apply_heads(p, &x);
    Ok((
        BatchOutput { logits, geom: g, k: p.cfg.k_bins },
        TrainCache { geom: g, col, stem_bn, blocks, feat: x },
    ))
}

impl<F: Real> TrainCache<F> {
    /// Fold this pass's batch statistics into the running estimates. The
    /// variance is stored unbiased.
    pub fn update_running_stats(&self, p: &mut NetParams<F>) {
        let mom = F::from_f64(p.cfg.bn_momentum).unwrap();
        let m = self.geom.cols();
        let unbias = if m > 1 {
            F::from_f64(m as f64 / (m as f64 - 1.0)).unwrap()
        } else {
            F::one()
        };
        let fold = |bn: &mut BatchNorm<F>, c: &BnCache<F>| {
            bn.running_mean.zip_mut_with(&c.mean, |r, &v| *r = (F::one() - mom) * *r + mom * v);
            bn.running_var.zip_mut_with(&c.var, |r, &v| *r = (F::one() - mom) * *r + mom * v * unbias);
        };
        fold(&mut p.stem_bn, &self.stem_bn);
        for (b, c) in p.blocks.iter_mut().zip(&self.blocks) {
            fold(&mut b.bn1, &c.bn1);
            fold(&mut b.bn2, &c.bn2);
            fold(&mut b.bn3, &c.bn3);
        }
    }
}

fn store<F: Real>(dst: &mut ndarray::Array4<F>, src: Array2<F>) {
    let shape = dst.raw_dim();
    *dst = src.into_shape_with_order(shape).expect("gradient shape matches kernel");
}

/// Gradients of a scalar loss with respect to every trainable tensor, given
/// the loss gradient with respect to the logits. Running-stat slots are zero.
pub fn backward<F: Real>(p: &NetParams<F>, cache: &TrainCache<F>, dlogits: ArrayView2<'_, F>) -> NetParams<F> {
    let mut grads = p.zeros_like();
    let g = cache.geom;
    let k = p.cfg.k_bins;

    let dwh = dlogits.dot(&cache.feat.t());
    let dbh = dlogits.sum_axis(Axis(1));
    store(&mut grads.detect.weight, dwh.slice(s![0..1, ..]).to_owned());
    store(&mut grads.xoff.weight, dwh.slice(s![1..1 + k, ..]).to_owned());
    store(&mut grads.zoff.weight, dwh.slice(s![1 + k..1 + 2 * k, ..]).to_owned());
    grads.detect.bias = dbh.slice(s![0..1]).to_owned();
    grads.xoff.bias = dbh.slice(s![1..1 + k]).to_owned();
    grads.zoff.bias = dbh.slice(s![1 + k..1 + 2 * k]).to_owned();

    let (wh, _) = heads(p);
    let mut dx = wh.t().dot(&dlogits);

    for (bi, b) in p.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        let (da3, dgm, dbt) = bn_gelu_backward(dx.clone(), &bc.bn3, b.bn3.gamma.view(), b.bn3.beta.view());
        gb.bn3.gamma = dgm;
        gb.bn3.beta = dbt;
        let g2 = bn_gelu_recompute(&bc.bn2, b.bn2.gamma.view(), b.bn2.beta.view());
        store(&mut gb.down, da3.dot(&g2.t()));
        drop(g2);
        let dg2 = mat(&b.down).t().dot(&da3);
        drop(da3);

        let (da2, dgm, dbt) = bn_gelu_backward(dg2, &bc.bn2, b.bn2.gamma.view(), b.bn2.beta.view());
        gb.bn2.gamma = dgm;
        gb.bn2.beta = dbt;
        let g1 = bn_gelu_recompute(&bc.bn1, b.bn1.gamma.view(), b.bn1.beta.view());
        store(&mut gb.up, da2.dot(&g1.t()));
        drop(g1);
        let dg1 = mat(&b.up).t().dot(&da2);
        drop(da2);

        let (da1, dgm, dbt) = bn_gelu_backward(dg1, &bc.bn1, b.bn1.gamma.view(), b.bn1.beta.view());
        gb.bn1.gamma = dgm;
        gb.bn1.beta = dbt;
        let (dxin, dk) = dwconv_backward(bc.x0.view(), dw_kernel(&b.dw), da1.view(), g);
        let shape = gb.dw.raw_dim();
        gb.dw = dk.into_shape_with_order(shape).expect("kernel shape");
        dx += &dxin;
    }

    let (da0, dgm, dbt) = bn_gelu_backward(dx, &cache.stem_bn, p.stem_bn.gamma.view(), p.stem_bn.beta.view());
    grads.stem_bn.gamma = dgm;
    grads.stem_bn.beta = dbt;
    store(&mut grads.stem, da0.dot(&cache.col.t()));
    grads
}

/// Eval-mode forward on a batch using running statistics. Pure.
pub fn forward_eval_batch<F: Real>(p: &NetParams<F>, input: ArrayView4<'_, F>) -> Result<BatchOutput<F>> {
    let g = check_input(p, &input)?;
    let eps = eps(p);
    let bn = |a: &mut Array2<F>, n: &BatchNorm<F>| {
        bn_gelu_eval(a, n.gamma.view(), n.beta.view(), n.running_mean.view(), n.running_var.view(), eps)
    };
    let col = im2col(input, p.cfg.stem_kernel);
    let mut x = mat(&p.stem).dot(&col);
    drop(col);
    bn(&mut x, &p.stem_bn);
    for b in &p.blocks {
        let mut a = dwconv_forward(x.view(), dw_kernel(&b.dw), g);
        bn(&mut a, &b.bn1);
        let mut a = mat(&b.up).dot(&a);
        bn(&mut a, &b.bn2);
        let mut a = mat(&b.down).dot(&a);
        bn(&mut a, &b.bn3);
        x += &a;
    }
    Ok(BatchOutput {
        logits: apply_heads(p, &x),
        geom: g,
        k: p.cfg.k_bins,
    })
}

/// Eval-mode forward on one `[m][H][W]` input.
pub fn forward_eval<F: Real>(p: &NetParams<F>, input: ArrayView3<'_, F>) -> Result<NetOutput<F>> {
    Ok(forward_eval_batch(p, input.insert_axis(Axis(0)))?.sample(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetConfig;
    use ndarray::{Array3, Array4};

    fn tiny() -> NetConfig {
        NetConfig {
            m: 2,
            stem_ch: 6,
            hidden_ch: 10,
            n_blocks: 2,
            ..NetConfig::default()
        }
    }

    fn noise(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
        let mut s = seed;
        Array3::from_shape_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        })
    }

    /// Params with non-trivial running stats so eval differs from train.
    fn trained_like(cfg: &NetConfig) -> NetParams<f32> {
        let mut p = NetParams::<f32>::init(cfg, 3).unwrap();
        let x = noise((cfg.m, 20, 20), 9).insert_axis(Axis(0)).to_owned();
        for _ in 0..3 {
            let (_, c) = forward_train(&p, x.view()).unwrap();
            c.update_running_stats(&mut p);
        }
        p
    }

    #[test]
    fn eval_shapes() {
        let cfg = tiny();
        let p = NetParams::<f32>::init(&cfg, 1).unwrap();
        let out = forward_eval(&p, noise((2, 17, 23), 1).view()).unwrap();
        assert_eq!(out.detect_logit.dim(), (17, 23));
        assert_eq!(out.xoff_logits.dim(), (4, 17, 23));
        assert_eq!(out.zoff_logits.dim(), (4, 17, 23));
    }

    #[test]
    fn zero_decoders_give_bias() {
        let cfg = tiny();
        let mut p = NetParams::<f32>::init(&cfg, 1).unwrap();
        p.detect.weight.fill(0.0);
        p.detect.bias.fill(-1.25);
        let out = forward_eval(&p, Array3::zeros((2, 9, 9)).view()).unwrap();
        assert!(out.detect_logit.iter().all(|&v| v == -1.25));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = NetParams::<f32>::init(&tiny(), 1).unwrap();
        assert!(forward_eval(&p, Array3::zeros((3, 16, 16)).view()).is_err());
        assert!(forward_eval(&p, Array3::zeros((2, 5, 16)).view()).is_err());
        let mut x = Array3::zeros((2, 16, 16));
        x[[0, 3, 3]] = f32::NAN;
        assert!(forward_eval(&p, x.view()).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let p = trained_like(&tiny());
        let x = noise((2, 24, 24), 5);
        let a = forward_eval(&p, x.view()).unwrap();
        let b = forward_eval(&p, x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_matches_single() {
        let p = trained_like(&tiny());
        let x0 = noise((2, 16, 16), 5);
        let x1 = noise((2, 16, 16), 6);
        let batch = ndarray::stack(Axis(0), &[x0.view(), x1.view()]).unwrap();
        let out = forward_eval_batch(&p, batch.view()).unwrap();
        let single = forward_eval(&p, x1.view()).unwrap();
        let diff = (&out.sample(1).detect_logit - &single.detect_logit).mapv(f32::abs);
        assert!(diff.iter().all(|&d| d < 1e-5));
    }

    #[test]
    fn translation_equivariance() {
        let cfg = tiny();
        let p = trained_like(&cfg);
        let x = noise((2, 40, 40), 11);
        let mut shifted = Array3::zeros((2, 40, 40));
        shifted.slice_mut(s![.., .., 1..]).assign(&x.slice(s![.., .., ..39]));
        let a = forward_eval(&p, x.view()).unwrap();
        let b = forward_eval(&p, shifted.view()).unwrap();
        let r = cfg.receptive_radius();
        for i in r..40 - r {
            for j in r..39 - r {
                assert!((a.detect_logit[[i, j]] - b.detect_logit[[i, j + 1]]).abs() < 1e-5);
                for kb in 0..4 {
                    assert!((a.xoff_logits[[kb, i, j]] - b.xoff_logits[[kb, i, j + 1]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn crop_matches_interior() {
        let cfg = tiny();
        let p = trained_like(&cfg);
        let full = noise((2, 48, 44), 13);
        let (top, left) = (10, 7);
        let crop = full.slice(s![.., top..top + 30, left..left + 30]).to_owned();
        let a = forward_eval(&p, full.view()).unwrap();
        let b = forward_eval(&p, crop.view()).unwrap();
        let r = cfg.receptive_radius();
        for i in r..30 - r {
            for j in r..30 - r {
                let d = (a.zoff_logits[[2, top + i, left + j]] - b.zoff_logits[[2, i, j]]).abs();
                assert!(d < 1e-5, "({i},{j}) differs by {d}");
            }
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let cfg = tiny();
        let mut p = NetParams::<f64>::init(&cfg, 1).unwrap();
        let x: Array4<f64> = noise((2, 12, 12), 2).mapv(|v| v as f64 * 4.0 + 1.0).insert_axis(Axis(0)).to_owned();
        let (_, c) = forward_train(&p, x.view()).unwrap();
        c.update_running_stats(&mut p);
        let mean = c.stem_bn.mean[0];
        assert!((p.stem_bn.running_mean[0] - 0.1 * mean).abs() < 1e-12);
        let unbiased = c.stem_bn.var[0] * 144.0 / 143.0;
        assert!((p.stem_bn.running_var[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn sample_roundtrip() {
        let p = NetParams::<f32>::init(&tiny(), 1).unwrap();
        let out = forward_eval(&p, noise((2, 9, 11), 1).view()).unwrap();
        let b = BatchOutput::from_sample(&out);
        assert_eq!(b.sample(0), out);
    }
}
