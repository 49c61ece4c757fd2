//! 3D convolution (cross-correlation), 2x2x2 max pooling, and trilinear
//! upsampling, each with its adjoint. Parallelism is over disjoint output
//! slices with a fixed reduction order per element, so results do not depend
//! on thread count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Grouped cross-correlation. x: (B, Ci, D, H, W); w: (Co, Ci/groups, kd, kh, kw).
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let [b, ci, d, h, wd] = x.d5();
    let [co, cig, kd, kh, kw] = w.d5();
    if groups == 0 || ci % groups != 0 || co % groups != 0 {
        return Err(Error::shape(format!("groups {groups} must divide Ci {ci} and Co {co}")));
    }
    if cig != ci / groups {
        return Err(Error::shape(format!(
            "kernel expects {cig} input channels per group, volume provides {}",
            ci / groups
        )));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let (od, oh, ow) = match (
        conv_out_dim(d, kd, stride, pad),
        conv_out_dim(h, kh, stride, pad),
        conv_out_dim(wd, kw, stride, pad),
    ) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::shape(format!("kernel {kd}x{kh}x{kw} too large for input {d}x{h}x{wd} with pad {pad}"))),
    };
    if let Some(bt) = bias {
        if bt.len() != co {
            return Err(Error::shape("bias length != output channels"));
        }
    }
    let co_g = co / groups;
    let ksz = kd * kh * kw;
    let osp = od * oh * ow;
    let mut out = Tensor::zeros(vec![b, co, od, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    out.data_mut().par_chunks_mut(osp).enumerate().for_each(|(idx, oslice)| {
        let bi = idx / co;
        let c_out = idx % co;
        let g = c_out / co_g;
        let bias_v = bias.map(|bt| bt.data()[c_out].dbl()).unwrap_or(0.0);
        let wbase = c_out * cig * ksz;
        for zo in 0..od {
            let z0 = zo * stride;
            let (kd_lo, kd_hi) = (pad.saturating_sub(z0), kd.min(d + pad - z0));
            for yo in 0..oh {
                let y0 = yo * stride;
                let (kh_lo, kh_hi) = (pad.saturating_sub(y0), kh.min(h + pad - y0));
                for xo in 0..ow {
                    let x0 = xo * stride;
                    let (kw_lo, kw_hi) = (pad.saturating_sub(x0), kw.min(wd + pad - x0));
                    let mut acc = bias_v;
                    for cl in 0..cig {
                        let c_in = g * cig + cl;
                        let xc = (bi * ci + c_in) * d;
                        let wc = wbase + cl * ksz;
                        for kz in kd_lo..kd_hi {
                            let iz = z0 + kz - pad;
                            for ky in kh_lo..kh_hi {
                                let iy = y0 + ky - pad;
                                let xrow = ((xc + iz) * h + iy) * wd;
                                let wrow = wc + (kz * kh + ky) * kw;
                                for kx in kw_lo..kw_hi {
                                    let ix = x0 + kx - pad;
                                    acc += xs[xrow + ix].dbl() * ws[wrow + kx].dbl();
                                }
                            }
                        }
                    }
                    oslice[(zo * oh + yo) * ow + xo] = T::of(acc);
                }
            }
        }
    });
    Ok(out)
}

/// Accumulates conv3d input gradients into dx (same shape as x).
pub fn conv3d_backward_x<T: Scalar>(
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    dx: &mut Tensor<T>,
) {
    let [_, ci, d, h, wd] = dx.d5();
    let [co, cig, kd, kh, kw] = w.d5();
    let [_, _, od, oh, ow] = dy.d5();
    let co_g = co / groups;
    let ksz = kd * kh * kw;
    let isp = d * h * wd;
    let ws = w.data();
    let dys = dy.data();
    dx.data_mut().par_chunks_mut(isp).enumerate().for_each(|(idx, xslice)| {
        let bi = idx / ci;
        let c_in = idx % ci;
        let g = c_in / cig;
        let cl = c_in % cig;
        for iz in 0..d {
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = 0.0;
                    for c_off in 0..co_g {
                        let c_out = g * co_g + c_off;
                        let wc = (c_out * cig + cl) * ksz;
                        let dyc = (bi * co + c_out) * od;
                        for kz in 0..kd {
                            let zn = iz + pad;
                            if zn < kz || (zn - kz) % stride != 0 {
                                continue;
                            }
                            let zo = (zn - kz) / stride;
                            if zo >= od {
                                continue;
                            }
                            for ky in 0..kh {
                                let yn = iy + pad;
                                if yn < ky || (yn - ky) % stride != 0 {
                                    continue;
                                }
                                let yo = (yn - ky) / stride;
                                if yo >= oh {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let xn = ix + pad;
                                    if xn < kx || (xn - kx) % stride != 0 {
                                        continue;
                                    }
                                    let xo = (xn - kx) / stride;
                                    if xo >= ow {
                                        continue;
                                    }
                                    acc += ws[wc + (kz * kh + ky) * kw + kx].dbl()
                                        * dys[((dyc + zo) * oh + yo) * ow + xo].dbl();
                                }
                            }
                        }
                    }
                    xslice[(iz * h + iy) * wd + ix] += T::of(acc);
                }
            }
        }
    });
}

/// Accumulates conv3d weight/bias gradients.
pub fn conv3d_backward_w<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
) {
    let [b, ci, d, h, wd] = x.d5();
    let [co, cig, kd, kh, kw] = dw.d5();
    let [_, _, od, oh, ow] = dy.d5();
    let co_g = co / groups;
    let ksz = kd * kh * kw;
    let xs = x.data();
    let dys = dy.data();
    dw.data_mut().par_chunks_mut(cig * ksz).enumerate().for_each(|(c_out, wslice)| {
        let g = c_out / co_g;
        for cl in 0..cig {
            let c_in = g * cig + cl;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let dyc = (bi * co + c_out) * od;
                            let xc = (bi * ci + c_in) * d;
                            for zo in 0..od {
                                let iz = zo * stride + kz;
                                if iz < pad || iz - pad >= d {
                                    continue;
                                }
                                let iz = iz - pad;
                                for yo in 0..oh {
                                    let iy = yo * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let dyrow = ((dyc + zo) * oh + yo) * ow;
                                    let xrow = ((xc + iz) * h + iy) * wd;
                                    for xo in 0..ow {
                                        let ix = xo * stride + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        acc += dys[dyrow + xo].dbl() * xs[xrow + ix - pad].dbl();
                                    }
                                }
                            }
                        }
                        wslice[(cl * kd + kz) * kh * kw + ky * kw + kx] += T::of(acc);
                    }
                }
            }
        }
    });
    if let Some(db) = db {
        let osp = od * oh * ow;
        db.data_mut().par_iter_mut().enumerate().for_each(|(c_out, slot)| {
            let mut acc = 0.0;
            for bi in 0..b {
                let base = (bi * co + c_out) * osp;
                for s in 0..osp {
                    acc += dys[base + s].dbl();
                }
            }
            *slot += T::of(acc);
        });
    }
}

/// 2x2x2 max pooling with stride 2; ties keep the first window element in
/// (d, h, w) scan order. Returns winner indices (flat spatial input index).
pub fn max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, d, h, w] = x.d5();
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::shape(format!("pooling needs spatial dims >= 2, got {d}x{h}x{w}")));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let isp = d * h * w;
    let osp = od * oh * ow;
    let mut out = Tensor::zeros(vec![b, c, od, oh, ow]);
    let mut arg = vec![0u32; b * c * osp];
    let xs = x.data();
    out.data_mut()
        .par_chunks_mut(osp)
        .zip(arg.par_chunks_mut(osp))
        .enumerate()
        .for_each(|(idx, (oslice, aslice))| {
            let base = idx * isp;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((zo * 2 + dz) * h + yo * 2 + dy) * w + xo * 2 + dx;
                                    let v = xs[base + i];
                                    if v > best {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        oslice[(zo * oh + yo) * ow + xo] = best;
                        aslice[(zo * oh + yo) * ow + xo] = best_i as u32;
                    }
                }
            }
        });
    Ok((out, arg))
}

/// Max pooling with every window's winner pinned in advance. Gradient audits
/// use this so finite-difference probes stay on the smooth branch that the
/// recorded argmax (and hence the backward pass) committed to.
pub fn max_pool_pinned<T: Scalar>(x: &Tensor<T>, arg: &[u32]) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.d5();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let isp = d * h * w;
    let osp = od * oh * ow;
    if arg.len() != b * c * osp {
        return Err(Error::shape(format!(
            "pinned pool winners: have {}, need {}",
            arg.len(),
            b * c * osp
        )));
    }
    let mut out = Tensor::zeros(vec![b, c, od, oh, ow]);
    let xs = x.data();
    out.data_mut().par_chunks_mut(osp).zip(arg.par_chunks(osp)).enumerate().for_each(
        |(idx, (oslice, aslice))| {
            let base = idx * isp;
            for (o, &win) in oslice.iter_mut().zip(aslice) {
                *o = xs[base + win as usize];
            }
        },
    );
    Ok(out)
}

pub fn max_pool_backward<T: Scalar>(arg: &[u32], dy: &Tensor<T>, dx: &mut Tensor<T>) {
    let [b, c, d, h, w] = dx.d5();
    let isp = d * h * w;
    let osp = dy.len() / (b * c);
    let dys = dy.data();
    dx.data_mut().par_chunks_mut(isp).enumerate().for_each(|(idx, xslice)| {
        for s in 0..osp {
            let i = arg[idx * osp + s] as usize;
            xslice[i] += dys[idx * osp + s];
        }
    });
}

// Per-axis trilinear tap table: output index -> (lo, hi, weight_hi).
// Sample centers follow (o + 0.5)/2 - 0.5 with edge clamping.
fn taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = s.floor();
            let w1 = s - f;
            let lo = (f.max(0.0) as usize).min(n_in - 1);
            let hi = ((f + 1.0).max(0.0) as usize).min(n_in - 1);
            (lo, hi, w1)
        })
        .collect()
}

/// Trilinear upsampling to exactly double each spatial dim.
pub fn upsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, d, h, w] = x.d5();
    let (td, th, tw) = (taps(d), taps(h), taps(w));
    let isp = d * h * w;
    let osp = 8 * isp;
    let mut out = Tensor::zeros(vec![b, c, 2 * d, 2 * h, 2 * w]);
    let xs = x.data();
    out.data_mut().par_chunks_mut(osp).enumerate().for_each(|(idx, oslice)| {
        let base = idx * isp;
        for (zo, &(z0, z1, wz)) in td.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in th.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in tw.iter().enumerate() {
                    let at = |z: usize, y: usize, xi: usize| xs[base + (z * h + y) * w + xi].dbl();
                    let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                    let c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                    let c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                    let c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    oslice[(zo * 2 * h + yo) * 2 * w + xo] = T::of(c0 * (1.0 - wz) + c1 * wz);
                }
            }
        }
    });
    out
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>, dx: &mut Tensor<T>) {
    let [b, c, d, h, w] = dx.d5();
    let (td, th, tw) = (taps(d), taps(h), taps(w));
    let isp = d * h * w;
    let osp = 8 * isp;
    let dys = dy.data();
    let _ = b;
    dx.data_mut().par_chunks_mut(isp).enumerate().for_each(|(idx, xslice)| {
        let _ = c;
        let base = idx * osp;
        for (zo, &(z0, z1, wz)) in td.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in th.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in tw.iter().enumerate() {
                    let g = dys[base + (zo * 2 * h + yo) * 2 * w + xo].dbl();
                    let mut add = |z: usize, y: usize, xi: usize, wgt: f64| {
                        xslice[(z * h + y) * w + xi] += T::of(g * wgt);
                    };
                    add(z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx));
                    add(z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx);
                    add(z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx));
                    add(z0, y1, x1, (1.0 - wz) * wy * wx);
                    add(z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx));
                    add(z1, y0, x1, wz * (1.0 - wy) * wx);
                    add(z1, y1, x0, wz * wy * (1.0 - wx));
                    add(z1, y1, x1, wz * wy * wx);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    /// Six-nested-loop oracle, no grouping fast path.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let [b, ci, d, h, wd] = x.d5();
        let [co, cig, kd, kh, kw] = w.d5();
        let od = conv_out_dim(d, kd, stride, pad).unwrap();
        let oh = conv_out_dim(h, kh, stride, pad).unwrap();
        let ow = conv_out_dim(wd, kw, stride, pad).unwrap();
        let co_g = co / groups;
        let mut out = Tensor::zeros(vec![b, co, od, oh, ow]);
        for bi in 0..b {
            for c_out in 0..co {
                let g = c_out / co_g;
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut acc = bias.map(|t| t.data()[c_out]).unwrap_or(0.0);
                            for cl in 0..cig {
                                let c_in = g * cig + cl;
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iz = (zo * stride + kz) as isize - pad as isize;
                                            let iy = (yo * stride + ky) as isize - pad as isize;
                                            let ix = (xo * stride + kx) as isize - pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            acc += x.data()[(((bi * ci + c_in) * d + iz) * h + iy) * wd + ix]
                                                * w.data()[(((c_out * cig + cl) * kd + kz) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bi * co + c_out) * od + zo) * oh + yo) * ow + xo] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(vec![1, 3, 2, 3, 4], &mut rng);
        let mut w = Tensor::zeros(vec![3, 3, 1, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv3d(&x, &w, None, 1, 0, 1).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_window_sums_to_27() {
        let x = Tensor::full(vec![1, 1, 3, 3, 3], 1.0f64);
        let w = Tensor::full(vec![1, 1, 3, 3, 3], 1.0f64);
        let y = conv3d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
        assert!((y.data()[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn matches_loop_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..8 {
            let x = rand_tensor(vec![1, 2, 4, 4, 4], &mut rng);
            let w = rand_tensor(vec![3, 2, 3, 3, 3], &mut rng);
            let b = rand_tensor(vec![3], &mut rng);
            let pad = trial % 2;
            let y = conv3d(&x, &w, Some(&b), 1, pad, 1).unwrap();
            let want = conv_oracle(&x, &w, Some(&b), 1, pad, 1);
            assert_eq!(y.dims(), want.dims());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-6, "trial {trial}");
            }
        }
    }

    #[test]
    fn strided_conv_matches_oracle_and_size_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(vec![2, 2, 5, 6, 7], &mut rng);
        let w = rand_tensor(vec![2, 2, 3, 3, 3], &mut rng);
        let y = conv3d(&x, &w, None, 2, 1, 1).unwrap();
        // floor((in + 2*pad - k)/stride) + 1
        assert_eq!(y.dims(), &[2, 2, 3, 3, 4]);
        let want = conv_oracle(&x, &w, None, 2, 1, 1);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grouped_and_depthwise_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(vec![1, 4, 3, 3, 3], &mut rng);
        let wg = rand_tensor(vec![4, 2, 3, 3, 3], &mut rng);
        let yg = conv3d(&x, &wg, None, 1, 1, 2).unwrap();
        let wantg = conv_oracle(&x, &wg, None, 1, 1, 2);
        for (a, b) in yg.data().iter().zip(wantg.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let wd = rand_tensor(vec![4, 1, 3, 3, 3], &mut rng);
        let ydw = conv3d(&x, &wd, None, 1, 1, 4).unwrap();
        let wantd = conv_oracle(&x, &wd, None, 1, 1, 4);
        for (a, b) in ydw.data().iter().zip(wantd.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatches_error() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![2, 2, 3, 3, 3]);
        assert!(conv3d(&x, &w, None, 1, 1, 1).is_err());
        let w_big = Tensor::<f64>::zeros(vec![2, 3, 7, 7, 7]);
        assert!(conv3d(&x, &w_big, None, 1, 0, 1).is_err());
    }

    #[test]
    fn pool_basics() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let (y, arg) = max_pool(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data()[0], 8.0);
        assert_eq!(arg[0], 7);

        let c = Tensor::full(vec![2, 3, 4, 4, 4], 1.25f64);
        let (yc, _) = max_pool(&c).unwrap();
        assert_eq!(yc.dims(), &[2, 3, 2, 2, 2]);
        assert!(yc.data().iter().all(|&v| v == 1.25));
        // idempotent on constant regions
        let (yc2, _) = max_pool(&yc).unwrap();
        assert!(yc2.data().iter().all(|&v| v == 1.25));

        let thin = Tensor::<f64>::zeros(vec![1, 1, 1, 4, 4]);
        assert!(max_pool(&thin).is_err());
    }

    #[test]
    fn pool_ties_keep_first() {
        let x = Tensor::full(vec![1, 1, 2, 2, 2], 3.0f64);
        let (_, arg) = max_pool(&x).unwrap();
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn upsample_line_hand_case() {
        // [0, 2] along W -> [0, 0.5, 1.5, 2]
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0f64, 2.0]).unwrap();
        let y = upsample(&x);
        assert_eq!(y.dims(), &[1, 1, 2, 2, 4]);
        let row = &y.data()[0..4];
        let want = [0.0, 0.5, 1.5, 2.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn upsample_constant_and_pool_round_trip() {
        let x = Tensor::full(vec![1, 2, 2, 2, 2], 0.8f64);
        let y = upsample(&x);
        assert_eq!(y.dims(), &[1, 2, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
        let (back, _) = max_pool(&y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_preserve_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![2, 4, 4, 4, 4], &mut rng);
        let w = rand_tensor(vec![4, 4, 3, 3, 3], &mut rng);
        assert!(conv3d(&x, &w, None, 1, 1, 1).unwrap().all_finite());
        assert!(max_pool(&x).unwrap().0.all_finite());
        assert!(upsample(&x).all_finite());
    }
}
