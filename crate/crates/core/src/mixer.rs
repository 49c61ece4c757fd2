//! Grouped state-space sequence mixer. A volume becomes a raster sequence,
//! channels split into g groups, each group runs an independent discretized
//! linear recursion plus a scaled residual, and the concatenated result is
//! normalized and projected back to volume form.

use crate::error::{Error, Result};
use crate::fault::{self, Fault};
use crate::ops;
use crate::params::{fan_in_uniform, Bucket, ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-5;

/// Continuous-time parameters of one channel group.
pub struct GroupHandles {
    pub a: ParamIdx,
    pub b_in: ParamIdx,
    pub c_out: ParamIdx,
    pub delta_raw: ParamIdx,
}

pub struct MixerHandles {
    pub ln_in: (ParamIdx, ParamIdx),
    pub groups: Vec<GroupHandles>,
    pub s_raw: ParamIdx,
    pub ln_out: (ParamIdx, ParamIdx),
    pub proj: ParamIdx,
    pub c_in: usize,
    pub c_out: usize,
}

/// State decay rates spread log-uniformly over [-4, -0.25].
fn a_init<T: Scalar>(d: usize) -> Tensor<T> {
    let denom = d.saturating_sub(1).max(1) as f64;
    let data = (0..d).map(|i| T::of(-0.25 * 16f64.powf(i as f64 / denom))).collect();
    Tensor::new(vec![d], data).expect("a init")
}

pub fn define<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    g: usize,
    d: usize,
    bucket: Bucket,
) -> Result<MixerHandles> {
    if g == 0 || c_in % g != 0 {
        return Err(Error::Config(format!("groups {g} must divide channels {c_in}")));
    }
    let cg = c_in / g;
    let ln_in = (
        store.add(format!("{prefix}.ln_in.g"), Tensor::full(vec![c_in], T::one()), bucket)?,
        store.add(format!("{prefix}.ln_in.b"), Tensor::zeros(vec![c_in]), bucket)?,
    );
    let mut groups = Vec::with_capacity(g);
    for j in 0..g {
        groups.push(GroupHandles {
            a: store.add(format!("{prefix}.g{j}.a"), a_init(d), bucket)?,
            b_in: store.add(format!("{prefix}.g{j}.b_in"), fan_in_uniform(rng, vec![d, cg], d), bucket)?,
            c_out: store.add(format!("{prefix}.g{j}.c_out"), fan_in_uniform(rng, vec![cg, d], d), bucket)?,
            delta_raw: store.add(
                format!("{prefix}.g{j}.delta_raw"),
                Tensor::full(vec![1], T::of(ops::softplus_inv(0.01))),
                bucket,
            )?,
        });
    }
    let s_raw = store.add(
        format!("{prefix}.s_raw"),
        Tensor::full(vec![1], T::of(ops::softplus_inv(1.0))),
        bucket,
    )?;
    let ln_out = (
        store.add(format!("{prefix}.ln_out.g"), Tensor::full(vec![c_in], T::one()), bucket)?,
        store.add(format!("{prefix}.ln_out.b"), Tensor::zeros(vec![c_in]), bucket)?,
    );
    let proj = store.add(format!("{prefix}.proj"), fan_in_uniform(rng, vec![c_in, c_out], c_in), bucket)?;
    Ok(MixerHandles { ln_in, groups, s_raw, ln_out, proj, c_in, c_out })
}

/// Scalar count of one mixer given widths: 2c (ln_in) + per group
/// (d + d*cg + cg*d + 1) + 1 (s) + 2c (ln_out) + c*c_out (proj).
pub fn param_count(c_in: usize, c_out: usize, g: usize, d: usize) -> usize {
    let cg = c_in / g;
    4 * c_in + g * (d + 2 * d * cg + 1) + 1 + c_in * c_out
}

/// Runs the mixer on a volume value and returns a volume value.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[ValId],
    h: &MixerHandles,
    x: ValId,
) -> Result<ValId> {
    let [_, c, d, hh, w] = {
        let dims = tape.dims(x);
        match dims {
            [a, b, c, d, e] => [*a, *b, *c, *d, *e],
            _ => return Err(Error::shape(format!("mixer expects a rank-5 volume, got {dims:?}"))),
        }
    };
    if c != h.c_in {
        return Err(Error::shape(format!("mixer built for {} channels, input has {c}", h.c_in)));
    }
    tape.stats.mixer_calls += 1;
    let g = h.groups.len();
    let cg = c / g;
    let seq = tape.vol_to_seq(x);
    let xn = tape.layer_norm(seq, ids[h.ln_in.0 .0], ids[h.ln_in.1 .0], NORM_EPS)?;
    let s = tape.softplus(ids[h.s_raw.0]);
    let mut parts = Vec::with_capacity(g);
    for (j, gh) in h.groups.iter().enumerate() {
        let xj = tape.narrow(xn, 2, j * cg, cg)?;
        let delta = tape.softplus(ids[gh.delta_raw.0]);
        let u = tape.mul_scalar(ids[gh.a.0], delta)?;
        let abar = tape.exp(u);
        let phi = tape.e1m(u);
        let bd = tape.mul_scalar(ids[gh.b_in.0], delta)?;
        let bbar = tape.row_scale(bd, phi)?;
        let scan = tape.ssm_scan(xj, abar, bbar, ids[gh.c_out.0])?;
        let res = tape.mul_scalar(xj, s)?;
        parts.push(tape.add(scan, res)?);
    }
    let z = tape.concat(&parts, 2)?;
    let zn = tape.layer_norm(z, ids[h.ln_out.0 .0], ids[h.ln_out.1 .0], NORM_EPS)?;
    let u = tape.matmul(zn, ids[h.proj.0], None)?;
    tape.seq_to_vol(u, [d, hh, w])
}

/// Closed-form zero-order-hold discretization of the diagonal system:
/// abar_i = exp(a_i Δ), bbar_ij = ((exp(a_i Δ) - 1)/a_i) b_ij, with the
/// Δ·b_ij limit when |a_i| < 1e-8.
pub fn discretize<T: Scalar>(
    a: &Tensor<T>,
    b_in: &Tensor<T>,
    delta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if delta <= 0.0 {
        return Err(Error::Param(format!("step size must be positive, got {delta}")));
    }
    let d = a.len();
    let [db, c] = b_in.d2();
    if db != d {
        return Err(Error::shape(format!("input map rows {db} != state size {d}")));
    }
    let euler = fault::current() == Fault::StateDecayFormula;
    let mut abar = Tensor::zeros(vec![d]);
    let mut bbar = Tensor::zeros(vec![d, c]);
    for i in 0..d {
        let ai = a.data()[i].dbl();
        let e = (ai * delta).exp();
        abar.data_mut()[i] = T::of(if euler { 1.0 + ai * delta } else { e });
        let coef = if ai.abs() < 1e-8 { delta } else { (e - 1.0) / ai };
        for j in 0..c {
            bbar.data_mut()[i * c + j] = T::of(coef * b_in.data()[i * c + j].dbl());
        }
    }
    Ok((abar, bbar))
}

/// Worst-case gain of the scan over a horizon: ‖c_out‖ Σ_{t<L} ‖abar‖^t ‖bbar‖
/// with operator norms from power iteration. Terms below 1e-14 of the
/// running sum stop the series early.
pub fn kappa_bound(abar: &Tensor<f64>, bbar: &Tensor<f64>, c_out: &Tensor<f64>, horizon: usize) -> f64 {
    let d = abar.len();
    let mut diag = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        diag.data_mut()[i * d + i] = abar.data()[i];
    }
    let na = ops::spectral_norm(&diag);
    let nb = ops::spectral_norm(bbar);
    let nc = ops::spectral_norm(c_out);
    let mut sum = 0.0;
    let mut term = 1.0; // ‖abar‖^0, including the 0^0 = 1 convention
    for _ in 0..horizon {
        sum += term;
        term *= na;
        if term < 1e-14 * sum.max(1.0) {
            break;
        }
    }
    nc * sum * nb
}

/// Largest per-position 2-norm across the batch of a (B, L, C) sequence.
pub fn sup_norm(x: &Tensor<f64>) -> f64 {
    let [b, l, c] = x.d3();
    let mut best = 0.0f64;
    for r in 0..b * l {
        let mut acc = 0.0;
        for j in 0..c {
            acc += x.data()[r * c + j] * x.data()[r * c + j];
        }
        best = best.max(acc.sqrt());
    }
    best
}
