//! Layer primitives on channel-major activations `[C][N*H*W]`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use ndarray::parallel::prelude::*;

use super::Real;

/// Spatial layout of the columns of a channel-major activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5).unwrap();
    x * half * (F::one() + (x * F::from_f64(INV_SQRT_2).unwrap()).erf())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5).unwrap();
    let cdf = half * (F::one() + (x * F::from_f64(INV_SQRT_2).unwrap()).erf());
    let pdf = F::from_f64(INV_SQRT_2PI).unwrap() * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Valid output range `[lo, hi)` along one axis for a tap at offset `off`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[y][x] += sum k[dy][dx] * inp[y+dy-r][x+dx-r]` with zero padding.
fn correlate_plane_acc<F: Real>(inp: &[F], out: &mut [F], ker: ArrayView2<'_, F>, h: usize, w: usize) {
    let kk = ker.nrows();
    let r = (kk / 2) as isize;
    for dy in 0..kk {
        let oy = dy as isize - r;
        let (y0, y1) = tap_range(h, oy);
        for dx in 0..kk {
            let ox = dx as isize - r;
            let (x0, x1) = tap_range(w, ox);
            let kv = ker[[dy, dx]];
            for y in y0..y1 {
                let iy = (y as isize + oy) as usize;
                let irow = &inp[iy * w..(iy + 1) * w];
                let orow = &mut out[y * w..(y + 1) * w];
                let ix0 = (x0 as isize + ox) as usize;
                for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                    *o += kv * i;
                }
            }
        }
    }
}

/// Adjoint of [`correlate_plane_acc`] with respect to the input.
fn correlate_plane_adjoint_acc<F: Real>(dout: &[F], dinp: &mut [F], ker: ArrayView2<'_, F>, h: usize, w: usize) {
    let kk = ker.nrows();
    let r = (kk / 2) as isize;
    for dy in 0..kk {
        let oy = dy as isize - r;
        let (y0, y1) = tap_range(h, oy);
        for dx in 0..kk {
            let ox = dx as isize - r;
            let (x0, x1) = tap_range(w, ox);
            let kv = ker[[dy, dx]];
            for y in y0..y1 {
                let iy = (y as isize + oy) as usize;
                let orow = &dout[y * w..(y + 1) * w];
                let irow = &mut dinp[iy * w..(iy + 1) * w];
                let ix0 = (x0 as isize + ox) as usize;
                for (i, &o) in irow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&orow[x0..x1]) {
                    *i += kv * o;
                }
            }
        }
    }
}

/// `dk[dy][dx] += sum dout[y][x] * inp[y+dy-r][x+dx-r]`.
fn correlate_plane_kernel_grad<F: Real>(inp: &[F], dout: &[F], dk: &mut Array2<F>, h: usize, w: usize) {
    let kk = dk.nrows();
    let r = (kk / 2) as isize;
    for dy in 0..kk {
        let oy = dy as isize - r;
        let (y0, y1) = tap_range(h, oy);
        for dx in 0..kk {
            let ox = dx as isize - r;
            let (x0, x1) = tap_range(w, ox);
            let mut acc = F::zero();
            for y in y0..y1 {
                let iy = (y as isize + oy) as usize;
                let orow = &dout[y * w + x0..y * w + x1];
                let ix0 = iy * w + (x0 as isize + ox) as usize;
                let irow = &inp[ix0..ix0 + (x1 - x0)];
                acc += orow.iter().zip(irow).fold(F::zero(), |s, (&a, &b)| s + a * b);
            }
            dk[[dy, dx]] += acc;
        }
    }
}

/// Depthwise same-padded convolution. `ker` is `[C][k][k]`.
pub fn dwconv_forward<F: Real>(x: ArrayView2<'_, F>, ker: ArrayView3<'_, F>, g: Geom) -> Array2<F> {
    let mut out = Array2::zeros(x.raw_dim());
    let hw = g.hw();
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(c, (mut o, xi))| {
            let o = o.as_slice_mut().expect("contiguous row");
            let xi = xi.as_slice().expect("contiguous row");
            let kc = ker.index_axis(Axis(0), c);
            for n in 0..g.n {
                correlate_plane_acc(&xi[n * hw..(n + 1) * hw], &mut o[n * hw..(n + 1) * hw], kc, g.h, g.w);
            }
        });
    out
}

/// Returns the input gradient and the kernel gradient.
pub fn dwconv_backward<F: Real>(
    x: ArrayView2<'_, F>,
    ker: ArrayView3<'_, F>,
    dout: ArrayView2<'_, F>,
    g: Geom,
) -> (Array2<F>, Array3<F>) {
    let hw = g.hw();
    let (c, kk) = (ker.dim().0, ker.dim().1);
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dk = Array3::zeros((c, kk, kk));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dk.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ci, (mut dxi, mut dki))| {
            let dxi = dxi.as_slice_mut().expect("contiguous row");
            let xi = x.row(ci);
            let xi = xi.as_slice().expect("contiguous row");
            let di = dout.row(ci);
            let di = di.as_slice().expect("contiguous row");
            let kc = ker.index_axis(Axis(0), ci);
            let mut acc = Array2::zeros((kk, kk));
            for n in 0..g.n {
                let r = n * hw..(n + 1) * hw;
                correlate_plane_adjoint_acc(&di[r.clone()], &mut dxi[r.clone()], kc, g.h, g.w);
                correlate_plane_kernel_grad(&xi[r.clone()], &di[r], &mut acc, g.h, g.w);
            }
            dki.assign(&acc);
        });
    (dx, dk)
}

/// Unfold an `[N][Cin][H][W]` input into `[Cin*k*k][N*H*W]` patches (zero padded).
pub fn im2col<F: Real>(input: ndarray::ArrayView4<'_, F>, k: usize) -> Array2<F> {
    let (n, cin, h, w) = input.dim();
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut col = Array2::zeros((cin * k * k, n * hw));
    for ni in 0..n {
        for ci in 0..cin {
            let plane = input.slice(ndarray::s![ni, ci, .., ..]);
            for dy in 0..k {
                let oy = dy as isize - r;
                let (y0, y1) = tap_range(h, oy);
                for dx in 0..k {
                    let ox = dx as isize - r;
                    let (x0, x1) = tap_range(w, ox);
                    let mut row = col.row_mut((ci * k + dy) * k + dx);
                    for y in y0..y1 {
                        let iy = (y as isize + oy) as usize;
                        for x in x0..x1 {
                            row[ni * hw + y * w + x] = plane[[iy, (x as isize + ox) as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Batch normalization statistics kept for the backward pass.
pub struct BnCache<F> {
    pub xhat: Array2<F>,
    pub invstd: Array1<F>,
    pub mean: Array1<F>,
    /// Biased batch variance.
    pub var: Array1<F>,
}

/// Training-mode batch norm followed by GELU. Returns the activation and the cache.
pub fn bn_gelu_train<F: Real>(
    a: Array2<F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
    eps: F,
) -> (Array2<F>, BnCache<F>) {
    let c = a.nrows();
    let m = a.ncols();
    let mut xhat = a;
    let mut invstd = Array1::zeros(c);
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    let mut out = Array2::zeros(xhat.raw_dim());
    xhat.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(out.axis_iter_mut(Axis(0)).into_par_iter())
        .zip(invstd.axis_iter_mut(Axis(0)).into_par_iter())
        .zip(mean.axis_iter_mut(Axis(0)).into_par_iter())
        .zip(var.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ci, ((((mut row, mut orow), mut is), mut mu), mut vr))| {
            let mf = m as f64;
            let mean_c = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / mf;
            let var_c = row
                .iter()
                .map(|v| (v.to_f64().unwrap() - mean_c).powi(2))
                .sum::<f64>()
                / mf;
            let inv = 1.0 / (var_c + eps.to_f64().unwrap()).sqrt();
            let (mu_f, inv_f) = (F::from_f64(mean_c).unwrap(), F::from_f64(inv).unwrap());
            let (gm, bt) = (gamma[ci], beta[ci]);
            Zip::from(&mut row).and(&mut orow).for_each(|x, o| {
                *x = (*x - mu_f) * inv_f;
                *o = gelu(gm * *x + bt);
            });
            is.fill(inv_f);
            mu.fill(mu_f);
            vr.fill(F::from_f64(var_c).unwrap());
        });
    (
        out,
        BnCache {
            xhat,
            invstd,
            mean,
            var,
        },
    )
}

/// Backward through GELU(BN(a)). Consumes the upstream gradient and returns
/// `(d a, d gamma, d beta)`.
pub fn bn_gelu_backward<F: Real>(
    mut dg: Array2<F>,
    cache: &BnCache<F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let c = dg.nrows();
    let m = dg.ncols();
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    dg.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dgamma.axis_iter_mut(Axis(0)).into_par_iter())
        .zip(dbeta.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ci, ((mut row, mut dgm), mut dbt))| {
            let xh = cache.xhat.row(ci);
            let (gm, bt) = (gamma[ci], beta[ci]);
            Zip::from(&mut row).and(&xh).for_each(|d, &x| *d = *d * gelu_grad(gm * x + bt));
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for (d, x) in row.iter().zip(xh.iter()) {
                let d = d.to_f64().unwrap();
                sum_d += d;
                sum_dx += d * x.to_f64().unwrap();
            }
            let scale = gm * cache.invstd[ci] / F::from_usize(m).unwrap();
            let (sd, sdx) = (F::from_f64(sum_d).unwrap(), F::from_f64(sum_dx).unwrap());
            let mf = F::from_usize(m).unwrap();
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|d, &x| *d = scale * (mf * *d - sd - x * sdx));
            dgm.fill(sdx);
            dbt.fill(sd);
        });
    (dg, dgamma, dbeta)
}

/// Rebuild the GELU(BN) output from a cache instead of storing it.
pub fn bn_gelu_recompute<F: Real>(cache: &BnCache<F>, gamma: ArrayView1<'_, F>, beta: ArrayView1<'_, F>) -> Array2<F> {
    let mut out = cache.xhat.clone();
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut row)| {
            let (gm, bt) = (gamma[ci], beta[ci]);
            row.mapv_inplace(|x| gelu(gm * x + bt));
        });
    out
}

/// Eval-mode batch norm with running statistics, followed by GELU (in place).
pub fn bn_gelu_eval<F: Real>(
    a: &mut Array2<F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
    mean: ArrayView1<'_, F>,
    var: ArrayView1<'_, F>,
    eps: F,
) {
    a.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut row)| {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            row.mapv_inplace(|x| gelu(x * scale + shift));
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayView4};

    fn naive_dwconv(x: &Array2<f64>, k: &Array3<f64>, g: Geom) -> Array2<f64> {
        let kk = k.dim().1 as isize;
        let r = kk / 2;
        Array2::from_shape_fn(x.raw_dim(), |(c, col)| {
            let n = col / g.hw();
            let (y, xx) = ((col % g.hw()) / g.w, col % g.w);
            let mut s = 0.0;
            for dy in 0..kk {
                for dx in 0..kk {
                    let (iy, ix) = (y as isize + dy - r, xx as isize + dx - r);
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        s += k[[c, dy as usize, dx as usize]] * x[[c, n * g.hw() + iy as usize * g.w + ix as usize]];
                    }
                }
            }
            s
        })
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn dwconv_matches_naive() {
        let g = Geom { n: 2, h: 5, w: 9 };
        let x = Array2::from_shape_vec((3, g.cols()), pseudo(3 * g.cols(), 1)).unwrap();
        let k = Array3::from_shape_vec((3, 7, 7), pseudo(147, 2)).unwrap();
        let fast = dwconv_forward(x.view(), k.view(), g);
        let slow = naive_dwconv(&x, &k, g);
        assert!(fast.iter().zip(slow.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dwconv_backward_is_adjoint() {
        // <conv(x), d> == <x, conv^T(d)> and kernel gradient matches <conv_k(x), d>.
        let g = Geom { n: 2, h: 6, w: 4 };
        let x = Array2::from_shape_vec((2, g.cols()), pseudo(2 * g.cols(), 3)).unwrap();
        let k = Array3::from_shape_vec((2, 3, 3), pseudo(18, 4)).unwrap();
        let d = Array2::from_shape_vec((2, g.cols()), pseudo(2 * g.cols(), 5)).unwrap();
        let y = dwconv_forward(x.view(), k.view(), g);
        let (dx, dk) = dwconv_backward(x.view(), k.view(), d.view(), g);
        let lhs: f64 = (&y * &d).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_k: f64 = (&k * &dk).sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let inp = Array4::from_shape_vec((2, 3, 4, 5), pseudo(120, 7)).unwrap();
        let col = im2col(ArrayView4::from(&inp), 3);
        assert_eq!(col.dim(), (27, 40));
        for c in 0..3 {
            let centre = col.row(c * 9 + 4);
            for n in 0..2 {
                for (idx, v) in inp.slice(ndarray::s![n, c, .., ..]).iter().enumerate() {
                    assert_eq!(centre[n * 20 + idx], *v);
                }
            }
        }
        // top-left tap at pixel (0, 0) reads padding
        assert_eq!(col[[0, 0]], 0.0);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158_655_253_931_457_05).abs() < 1e-12);
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn bn_train_normalizes_rows() {
        let a = Array2::from_shape_vec((2, 50), pseudo(100, 9)).unwrap().mapv(|v| 3.0 * v + 2.0);
        let gamma = Array1::ones(2);
        let beta = Array1::zeros(2);
        let (_, cache) = bn_gelu_train(a, gamma.view(), beta.view(), 1e-5);
        for row in cache.xhat.rows() {
            let m = row.mean().unwrap();
            let v = row.mapv(|x| (x - m) * (x - m)).mean().unwrap();
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3);
        }
    }
}
