//! Scalar activations plus the normalization / linear-algebra kernels shared
//! by the tape and the oracle tests. Every kernel accumulates in f64 with a
//! fixed reduction order so results are bitwise thread-count independent.

use crate::error::{Error, Result};
use crate::fault::{self, Fault};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid used by the gate paths (spatial mask, channel gates). Subject to
/// fault injection; everything else goes through `sigmoid_raw`.
pub fn sigmoid_gate(x: f64) -> f64 {
    let s = sigmoid_raw(x);
    if fault::current() == Fault::GateSigmoid {
        s + 0.3
    } else {
        s
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    y.exp_m1().ln()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid_raw(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid_raw(x);
    s * (1.0 + x * (1.0 - s))
}

/// (e^u - 1)/u, the scale factor turning the input map into its discrete
/// counterpart (delta * e1m(a*delta)). Series expansion keeps the removable
/// singularity at u = 0 smooth.
pub fn e1m(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        1.0 + u / 2.0 + u * u / 6.0 + u * u * u / 24.0
    } else {
        u.exp_m1() / u
    }
}

/// d/du of e1m.
pub fn e1m_grad(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0
    } else {
        ((u - 1.0) * u.exp() + 1.0) / (u * u)
    }
}

/// Per-position channel normalization on a (B, L, C) sequence.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [b, l, c] = x.d3();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(format!(
            "layer_norm affine length {}/{} != channels {c}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(vec![b, l, c]);
    let (xs, gs, bs) = (x.data(), gain.data(), bias.data());
    let od = out.data_mut();
    for p in 0..b * l {
        let row = &xs[p * c..(p + 1) * c];
        let mut mean = 0.0;
        for &v in row {
            mean += v.dbl();
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in row {
            let d = v.dbl() - mean;
            var += d * d;
        }
        var /= c as f64;
        let r = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            let xhat = (row[i].dbl() - mean) * r;
            od[p * c + i] = T::of(xhat * gs[i].dbl() + bs[i].dbl());
        }
    }
    Ok(out)
}

pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
    dx: &mut Tensor<T>,
    dgain: Option<&mut Tensor<T>>,
    dbias: Option<&mut Tensor<T>>,
) {
    let [b, l, c] = x.d3();
    let (xs, gs, dys) = (x.data(), gain.data(), dy.data());
    let dxs = dx.data_mut();
    let mut dg = vec![0.0f64; c];
    let mut db = vec![0.0f64; c];
    for p in 0..b * l {
        let row = &xs[p * c..(p + 1) * c];
        let dyr = &dys[p * c..(p + 1) * c];
        let mut mean = 0.0;
        for &v in row {
            mean += v.dbl();
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in row {
            let d = v.dbl() - mean;
            var += d * d;
        }
        var /= c as f64;
        let r = 1.0 / (var + eps).sqrt();
        // dxhat = dy*gain; dx = r*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..c {
            let xhat = (row[i].dbl() - mean) * r;
            let dxh = dyr[i].dbl() * gs[i].dbl();
            m1 += dxh;
            m2 += dxh * xhat;
            dg[i] += dyr[i].dbl() * xhat;
            db[i] += dyr[i].dbl();
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for i in 0..c {
            let xhat = (row[i].dbl() - mean) * r;
            let dxh = dyr[i].dbl() * gs[i].dbl();
            dxs[p * c + i] += T::of(r * (dxh - m1 - xhat * m2));
        }
    }
    if let Some(t) = dgain {
        for (slot, v) in t.data_mut().iter_mut().zip(dg) {
            *slot += T::of(v);
        }
    }
    if let Some(t) = dbias {
        for (slot, v) in t.data_mut().iter_mut().zip(db) {
            *slot += T::of(v);
        }
    }
}

/// Group normalization over (channels-in-group x D x H x W) per batch element,
/// population variance, then per-channel affine.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.d5();
    if c % groups != 0 {
        return Err(Error::shape(format!("channels {c} not divisible by groups {groups}")));
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("group_norm affine length != channels"));
    }
    let cg = c / groups;
    let sp = d * h * w;
    let n = (cg * sp) as f64;
    let mut out = Tensor::zeros(vec![b, c, d, h, w]);
    let (xs, gs, bs) = (x.data(), gain.data(), bias.data());
    let od = out.data_mut();
    for bi in 0..b {
        for g in 0..groups {
            let base = (bi * c + g * cg) * sp;
            let chunk = &xs[base..base + cg * sp];
            let mut mean = 0.0;
            for &v in chunk {
                mean += v.dbl();
            }
            mean /= n;
            let mut var = 0.0;
            for &v in chunk {
                let dv = v.dbl() - mean;
                var += dv * dv;
            }
            var /= n;
            let r = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (gg, bb) = (gs[ch].dbl(), bs[ch].dbl());
                for s in 0..sp {
                    let xhat = (chunk[ci * sp + s].dbl() - mean) * r;
                    od[base + ci * sp + s] = T::of(xhat * gg + bb);
                }
            }
        }
    }
    Ok(out)
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
    dx: &mut Tensor<T>,
    dgain: Option<&mut Tensor<T>>,
    dbias: Option<&mut Tensor<T>>,
) {
    let [b, c, d, h, w] = x.d5();
    let cg = c / groups;
    let sp = d * h * w;
    let n = (cg * sp) as f64;
    let (xs, gs, dys) = (x.data(), gain.data(), dy.data());
    let dxs = dx.data_mut();
    let mut dg = vec![0.0f64; c];
    let mut db = vec![0.0f64; c];
    for bi in 0..b {
        for g in 0..groups {
            let base = (bi * c + g * cg) * sp;
            let chunk = &xs[base..base + cg * sp];
            let dyc = &dys[base..base + cg * sp];
            let mut mean = 0.0;
            for &v in chunk {
                mean += v.dbl();
            }
            mean /= n;
            let mut var = 0.0;
            for &v in chunk {
                let dv = v.dbl() - mean;
                var += dv * dv;
            }
            var /= n;
            let r = 1.0 / (var + eps).sqrt();
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let gg = gs[ch].dbl();
                for s in 0..sp {
                    let i = ci * sp + s;
                    let xhat = (chunk[i].dbl() - mean) * r;
                    let dxh = dyc[i].dbl() * gg;
                    m1 += dxh;
                    m2 += dxh * xhat;
                    dg[ch] += dyc[i].dbl() * xhat;
                    db[ch] += dyc[i].dbl();
                }
            }
            m1 /= n;
            m2 /= n;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let gg = gs[ch].dbl();
                for s in 0..sp {
                    let i = ci * sp + s;
                    let xhat = (chunk[i].dbl() - mean) * r;
                    let dxh = dyc[i].dbl() * gg;
                    dxs[base + i] += T::of(r * (dxh - m1 - xhat * m2));
                }
            }
        }
    }
    if let Some(t) = dgain {
        for (slot, v) in t.data_mut().iter_mut().zip(dg) {
            *slot += T::of(v);
        }
    }
    if let Some(t) = dbias {
        for (slot, v) in t.data_mut().iter_mut().zip(db) {
            *slot += T::of(v);
        }
    }
}

/// y[.., m] = x[.., n] @ w[n, m] (+ b[m]); x may have any leading shape.
pub fn matmul_last<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, m] = w.d2();
    let xin = *x.dims().last().unwrap();
    if xin != n {
        return Err(Error::shape(format!("matmul inner dims differ: x ..x{xin} vs w {n}x{m}")));
    }
    if let Some(bt) = b {
        if bt.len() != m {
            return Err(Error::shape("matmul bias length != output width"));
        }
    }
    let rows = x.len() / n;
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = m;
    let mut out = Tensor::zeros(dims);
    let (xs, ws) = (x.data(), w.data());
    let od = out.data_mut();
    for r in 0..rows {
        let xr = &xs[r * n..(r + 1) * n];
        for j in 0..m {
            let mut acc = b.map(|bt| bt.data()[j].dbl()).unwrap_or(0.0);
            for i in 0..n {
                acc += xr[i].dbl() * ws[i * m + j].dbl();
            }
            od[r * m + j] = T::of(acc);
        }
    }
    Ok(out)
}

pub fn matmul_last_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dx: &mut Tensor<T>,
    dw: &mut Tensor<T>,
    mut db: Option<&mut Tensor<T>>,
) {
    let [n, m] = w.d2();
    let rows = x.len() / n;
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    for r in 0..rows {
        let xr = &xs[r * n..(r + 1) * n];
        let dyr = &dys[r * m..(r + 1) * m];
        {
            let dxr = &mut dx.data_mut()[r * n..(r + 1) * n];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += dyr[j].dbl() * ws[i * m + j].dbl();
                }
                dxr[i] += T::of(acc);
            }
        }
        {
            let dwd = dw.data_mut();
            for i in 0..n {
                let xv = xr[i].dbl();
                for j in 0..m {
                    dwd[i * m + j] += T::of(xv * dyr[j].dbl());
                }
            }
        }
        if let Some(bt) = db.as_deref_mut() {
            let bd = bt.data_mut();
            for j in 0..m {
                bd[j] += T::of(dyr[j].dbl());
            }
        }
    }
}

/// Global average pool over the spatial axes: (B,C,D,H,W) -> (B,C).
pub fn gap<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, d, h, w] = x.d5();
    let sp = d * h * w;
    let mut out = Tensor::zeros(vec![b, c]);
    let xs = x.data();
    let od = out.data_mut();
    for i in 0..b * c {
        let mut acc = 0.0;
        for s in 0..sp {
            acc += xs[i * sp + s].dbl();
        }
        od[i] = T::of(acc / sp as f64);
    }
    out
}

/// Channel-mean map: (B,C,D,H,W) -> (B,1,D,H,W).
pub fn chan_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, d, h, w] = x.d5();
    let sp = d * h * w;
    let mut out = Tensor::zeros(vec![b, 1, d, h, w]);
    let xs = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for s in 0..sp {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += xs[(bi * c + ci) * sp + s].dbl();
            }
            od[bi * sp + s] = T::of(acc / c as f64);
        }
    }
    out
}

/// Channel-max map with winner indices for the backward pass. First maximum
/// wins on ties.
pub fn chan_max<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [b, c, d, h, w] = x.d5();
    let sp = d * h * w;
    let mut out = Tensor::zeros(vec![b, 1, d, h, w]);
    let mut arg = vec![0u32; b * sp];
    let xs = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for s in 0..sp {
            let mut best = xs[bi * c * sp + s];
            let mut bi_c = 0u32;
            for ci in 1..c {
                let v = xs[(bi * c + ci) * sp + s];
                if v > best {
                    best = v;
                    bi_c = ci as u32;
                }
            }
            od[bi * sp + s] = best;
            arg[bi * sp + s] = bi_c;
        }
    }
    (out, arg)
}

/// Channel max with the winning channel of every voxel pinned in advance;
/// companion to the pinned pooling kernel for branch-stable gradient audits.
pub fn chan_max_pinned<T: Scalar>(x: &Tensor<T>, arg: &[u32]) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.d5();
    let sp = d * h * w;
    if arg.len() != b * sp {
        return Err(Error::shape(format!(
            "pinned channel winners: have {}, need {}",
            arg.len(),
            b * sp
        )));
    }
    let mut out = Tensor::zeros(vec![b, 1, d, h, w]);
    let xs = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for s in 0..sp {
            let ci = arg[bi * sp + s] as usize;
            od[bi * sp + s] = xs[(bi * c + ci) * sp + s];
        }
    }
    Ok(out)
}

/// Largest singular value by power iteration on A^T A, tolerance 1e-8.
pub fn spectral_norm(mat: &Tensor<f64>) -> f64 {
    let [m, n] = mat.d2();
    let a = mat.data();
    // deterministic start: normalized alternating vector avoids orthogonal
    // starts for sign-symmetric matrices
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64 * 1.7).sin())).collect();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut u = vec![0.0f64; m];
    let mut sigma_prev = 0.0;
    for _ in 0..10_000 {
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * v[j];
            }
            u[i] = acc;
        }
        let nu = norm(&u);
        if nu == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..m {
                acc += a[i * n + j] * u[i];
            }
            v[j] = acc;
        }
        let sigma = norm(&v);
        if sigma == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= sigma);
        if (sigma - sigma_prev).abs() <= 1e-8 * sigma.max(1.0) {
            return sigma;
        }
        sigma_prev = sigma;
    }
    sigma_prev
}

/// Linear recurrence y_k = C h_k, h_k = abar ⊙ h_{k-1} + B x_k with h_0 = 0
/// read out after the update. x is (B, L, C_in); abar (d); bbar (d, C_in);
/// cout (C_out, d). When save_h is set the per-step states (B, L, d) come
/// back for the adjoint pass. State math runs in f64 regardless of T.
pub fn ssm_scan_kernel<T: Scalar>(
    x: &Tensor<T>,
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    cout: &Tensor<T>,
    save_h: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let [b, l, cin] = x.d3();
    let d = abar.len();
    if bbar.dims() != [d, cin] {
        return Err(Error::shape(format!(
            "state input map dims {:?}, expected [{d}, {cin}]",
            bbar.dims()
        )));
    }
    let [cout_n, d2] = cout.d2();
    if d2 != d {
        return Err(Error::shape(format!("readout dims {:?}, expected [*, {d}]", cout.dims())));
    }
    let ab: Vec<f64> = abar.data().iter().map(|v| v.dbl()).collect();
    let bb: Vec<f64> = bbar.data().iter().map(|v| v.dbl()).collect();
    let co: Vec<f64> = cout.data().iter().map(|v| v.dbl()).collect();
    let mut y = Tensor::zeros(vec![b, l, cout_n]);
    let mut hs = save_h.then(|| Tensor::<T>::zeros(vec![b, l, d]));
    let run = |xb: &[T], yb: &mut [T], hb: Option<&mut [T]>| {
        let mut h = vec![0.0f64; d];
        let mut hb = hb;
        for k in 0..l {
            let xk = &xb[k * cin..(k + 1) * cin];
            for i in 0..d {
                let mut u = 0.0;
                for j in 0..cin {
                    u += bb[i * cin + j] * xk[j].dbl();
                }
                h[i] = ab[i] * h[i] + u;
            }
            let yk = &mut yb[k * cout_n..(k + 1) * cout_n];
            for c in 0..cout_n {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += co[c * d + i] * h[i];
                }
                yk[c] = T::of(acc);
            }
            if let Some(hb) = hb.as_deref_mut() {
                for i in 0..d {
                    hb[k * d + i] = T::of(h[i]);
                }
            }
        }
    };
    // batches are independent; parallelize over them
    use rayon::prelude::*;
    match &mut hs {
        Some(hs) => {
            y.data_mut()
                .par_chunks_mut(l * cout_n)
                .zip(hs.data_mut().par_chunks_mut(l * d))
                .enumerate()
                .for_each(|(bi, (yb, hb))| run(&x.data()[bi * l * cin..(bi + 1) * l * cin], yb, Some(hb)));
        }
        None => {
            y.data_mut()
                .par_chunks_mut(l * cout_n)
                .enumerate()
                .for_each(|(bi, yb)| run(&x.data()[bi * l * cin..(bi + 1) * l * cin], yb, None));
        }
    }
    Ok((y, hs))
}

/// Adjoint of the scan. lam_k = cout^T dy_k + abar ⊙ lam_{k+1} runs backward
/// over positions; batches accumulate sequentially so parameter gradients
/// stay deterministic.
#[allow(clippy::too_many_arguments)]
pub fn ssm_scan_backward<T: Scalar>(
    x: &Tensor<T>,
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    cout: &Tensor<T>,
    h: &Tensor<T>,
    dy: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    dabar: &mut Tensor<T>,
    dbbar: &mut Tensor<T>,
    dcout: &mut Tensor<T>,
) {
    let [b, l, cin] = x.d3();
    let d = abar.len();
    let cout_n = cout.d2()[0];
    let ab: Vec<f64> = abar.data().iter().map(|v| v.dbl()).collect();
    let bb: Vec<f64> = bbar.data().iter().map(|v| v.dbl()).collect();
    let co: Vec<f64> = cout.data().iter().map(|v| v.dbl()).collect();
    let mut ga = vec![0.0f64; d];
    let mut gb = vec![0.0f64; d * cin];
    let mut gc = vec![0.0f64; cout_n * d];
    for bi in 0..b {
        let xb = &x.data()[bi * l * cin..(bi + 1) * l * cin];
        let hb = &h.data()[bi * l * d..(bi + 1) * l * d];
        let dyb = &dy.data()[bi * l * cout_n..(bi + 1) * l * cout_n];
        let mut lam = vec![0.0f64; d];
        for k in (0..l).rev() {
            // decay lam_{k+1} then fold in the readout pull-back -> lam_k
            for i in 0..d {
                lam[i] *= ab[i];
            }
            let dyk = &dyb[k * cout_n..(k + 1) * cout_n];
            let hk = &hb[k * d..(k + 1) * d];
            for c in 0..cout_n {
                let dv = dyk[c].dbl();
                for i in 0..d {
                    lam[i] += co[c * d + i] * dv;
                    gc[c * d + i] += dv * hk[i].dbl();
                }
            }
            let xk = &xb[k * cin..(k + 1) * cin];
            for i in 0..d {
                let li = lam[i];
                if k > 0 {
                    ga[i] += li * hb[(k - 1) * d + i].dbl();
                }
                for j in 0..cin {
                    gb[i * cin + j] += li * xk[j].dbl();
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxk = &mut dx.data_mut()[bi * l * cin + k * cin..bi * l * cin + (k + 1) * cin];
                for j in 0..cin {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += bb[i * cin + j] * lam[i];
                    }
                    dxk[j] = T::of(dxk[j].dbl() + acc);
                }
            }
        }
    }
    for (o, v) in dabar.data_mut().iter_mut().zip(ga) {
        *o = T::of(o.dbl() + v);
    }
    for (o, v) in dbbar.data_mut().iter_mut().zip(gb) {
        *o = T::of(o.dbl() + v);
    }
    for (o, v) in dcout.data_mut().iter_mut().zip(gc) {
        *o = T::of(o.dbl() + v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(b: usize, l: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::new(vec![b, l, c], (0..b * l * c).map(|i| f(i)).collect()).unwrap()
    }

    #[test]
    fn layer_norm_two_channel_hand_case() {
        // channels [1,3], gain=1, bias=0, eps=0 -> [-1, 1]
        let x = t3(1, 1, 2, |i| [1.0, 3.0][i]);
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_collapses_to_bias() {
        let x = t3(2, 3, 4, |_| 2.5);
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.7; 4]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_gain_broadcasts_bias() {
        let x = t3(1, 2, 3, |i| i as f64);
        let g = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_standardizes_each_position() {
        let x = t3(2, 4, 8, |i| ((i * 37 + 11) % 23) as f64 * 0.3 - 2.0);
        let g = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        let b = Tensor::new(vec![8], vec![0.0; 8]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for p in 0..8 {
            let row = &y.data()[p * 8..(p + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn group_norm_single_group_hand_case() {
        // values {1,3,5,9}: mean 4.5, population std sqrt(8.75)
        let x = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = group_norm(&x, 1, &g, &b, 0.0).unwrap();
        let std = 8.75f64.sqrt();
        let want = [(1.0 - 4.5) / std, (3.0 - 4.5) / std, (5.0 - 4.5) / std, (9.0 - 4.5) / std];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_with_group_per_channel_is_instance_norm() {
        let dims = vec![2usize, 4, 2, 2, 2];
        let n: usize = dims.iter().product();
        let x = Tensor::new(dims, (0..n).map(|i| ((i * 31 + 7) % 17) as f64 * 0.21).collect()).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = group_norm(&x, 4, &g, &b, 1e-6).unwrap();
        // direct per-channel computation
        for bi in 0..2 {
            for c in 0..4 {
                let chunk: Vec<f64> = (0..8).map(|s| x.data()[(bi * 4 + c) * 8 + s]).collect();
                let mean: f64 = chunk.iter().sum::<f64>() / 8.0;
                let var: f64 = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                for s in 0..8 {
                    let want = (chunk[s] - mean) / (var + 1e-6).sqrt();
                    let got = y.data()[(bi * 4 + c) * 8 + s];
                    assert!((got - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn group_norm_constant_input_gives_bias() {
        let x = Tensor::full(vec![1, 4, 2, 2, 2], 3.3f64);
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.5, -0.5, 2.0, 0.0]).unwrap();
        let y = group_norm(&x, 2, &g, &b, 1e-5).unwrap();
        for c in 0..4 {
            for s in 0..8 {
                assert!((y.data()[c * 8 + s] - b.data()[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2, 2]);
        let g = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(group_norm(&x, 2, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn matmul_matches_hand_case() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let y = matmul_last(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[14.0, 25.0, 20.0, 31.0]);
    }

    #[test]
    fn gap_averages_spatial() {
        let x = Tensor::new(vec![1, 2, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        let y = gap(&x);
        assert_eq!(y.dims(), &[1, 2]);
        assert!((y.data()[0] - 2.5f64).abs() < 1e-12);
        assert!((y.data()[1] - 10.0f64).abs() < 1e-12);
    }

    #[test]
    fn chan_stats_shapes_and_values() {
        let x = Tensor::new(vec![1, 3, 1, 1, 2], vec![1.0, 4.0, 5.0, 2.0, 3.0, 9.0]).unwrap();
        let m = chan_mean(&x);
        assert_eq!(m.dims(), &[1, 1, 1, 1, 2]);
        assert!((m.data()[0] - 3.0f64).abs() < 1e-12);
        assert!((m.data()[1] - 5.0f64).abs() < 1e-12);
        let (mx, arg) = chan_max(&x);
        assert_eq!(mx.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn spectral_norm_of_known_matrices() {
        let diag = Tensor::new(vec![3, 3], vec![0.5, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&diag) - 2.0).abs() < 1e-6);
        // rank-1: [[3,4]] has singular value 5
        let r1 = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert!((spectral_norm(&r1) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn activation_identities() {
        assert!((sigmoid_raw(0.0) - 0.5).abs() < 1e-15);
        assert!((softplus(softplus_inv(0.01)) - 0.01).abs() < 1e-12);
        assert!((softplus(softplus_inv(1.0)) - 1.0).abs() < 1e-12);
        assert!((e1m(0.0) - 1.0).abs() < 1e-15);
        // both e1m branches agree with exp_m1(u)/u next to the switch point
        for &u in &[0.99e-4f64, 1.01e-4, -0.99e-4, -1.01e-4] {
            let reference = u.exp_m1() / u;
            assert!((e1m(u) - reference).abs() < 1e-13, "u={u}");
        }
        // derivative against central differences
        for &u in &[-2.0, -0.5, -1e-5, 1e-5, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (e1m(u + h) - e1m(u - h)) / (2.0 * h);
            assert!((e1m_grad(u) - fd).abs() < 1e-8, "u={u}");
        }
    }

}
