//! Cross-scale dual-stage gating over the encoder skip tensors. Stage one
//! applies a per-scale spatial sigmoid mask (shared 7x7x7 kernel over
//! channel mean/max maps); stage two gates channels from statistics pooled
//! across ALL scales; both rejoin the skip through a bounded residual
//! t + alpha * t_sp + beta * (g .* t_sp).

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{fan_in_uniform, Bucket, ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_PAD: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    #[default]
    Full,
    SpatialOnly,
    ChannelOnly,
    Off,
}

impl BridgeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BridgeMode::Full),
            "spatial_only" => Ok(BridgeMode::SpatialOnly),
            "channel_only" => Ok(BridgeMode::ChannelOnly),
            "off" => Ok(BridgeMode::Off),
            other => Err(Error::Config(format!(
                "unknown bridge.mode {other:?}; expected full, spatial_only, channel_only, or off"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BridgeMode::Full => "full",
            BridgeMode::SpatialOnly => "spatial_only",
            BridgeMode::ChannelOnly => "channel_only",
            BridgeMode::Off => "off",
        }
    }
}

pub struct BridgeHandles {
    pub spatial_w: ParamIdx,
    pub spatial_b: ParamIdx,
    /// One (W_s, b_s) pair per scale; W_s maps the pooled cross-scale vector
    /// of width C_total to this scale's channel count.
    pub gates: Vec<(ParamIdx, ParamIdx)>,
    pub alpha_raw: ParamIdx,
    pub beta_raw: ParamIdx,
    pub channels: Vec<usize>,
}

pub fn define<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    channels: &[usize],
    bucket: Bucket,
) -> Result<BridgeHandles> {
    if channels.is_empty() {
        return Err(Error::Config("bridge needs at least one scale".into()));
    }
    let k3 = SPATIAL_KERNEL.pow(3);
    let c_total: usize = channels.iter().sum();
    let spatial_w = store.add(
        format!("{prefix}.spatial.w"),
        fan_in_uniform(rng, vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL, SPATIAL_KERNEL], 2 * k3),
        bucket,
    )?;
    let spatial_b = store.add(format!("{prefix}.spatial.b"), Tensor::zeros(vec![1]), bucket)?;
    let mut gates = Vec::with_capacity(channels.len());
    for (s, &c) in channels.iter().enumerate() {
        gates.push((
            store.add(format!("{prefix}.gate{s}.w"), fan_in_uniform(rng, vec![c_total, c], c_total), bucket)?,
            store.add(format!("{prefix}.gate{s}.b"), Tensor::zeros(vec![c]), bucket)?,
        ));
    }
    let near_identity = T::of(ops::softplus_inv(0.1));
    let alpha_raw = store.add(format!("{prefix}.alpha_raw"), Tensor::full(vec![1], near_identity), bucket)?;
    let beta_raw = store.add(format!("{prefix}.beta_raw"), Tensor::full(vec![1], near_identity), bucket)?;
    Ok(BridgeHandles { spatial_w, spatial_b, gates, alpha_raw, beta_raw, channels: channels.to_vec() })
}

pub fn param_count(channels: &[usize]) -> usize {
    let c_total: usize = channels.iter().sum();
    2 * SPATIAL_KERNEL.pow(3) + 1 + c_total * c_total + c_total + 2
}

/// Applies the bridge to one tensor per scale, returning the fused skips in
/// the same order. Off mode returns the inputs untouched.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[ValId],
    h: &BridgeHandles,
    mode: BridgeMode,
    scales: &[ValId],
) -> Result<Vec<ValId>> {
    if scales.len() != h.channels.len() {
        return Err(Error::shape(format!(
            "bridge built for {} scales, got {}",
            h.channels.len(),
            scales.len()
        )));
    }
    for (s, &t) in scales.iter().enumerate() {
        let dims = tape.dims(t);
        if dims.len() != 5 || dims[1] != h.channels[s] {
            return Err(Error::shape(format!(
                "scale {s} expects {} channels, got {dims:?}",
                h.channels[s]
            )));
        }
    }
    tape.stats.bridge_calls += 1;
    if mode == BridgeMode::Off {
        return Ok(scales.to_vec());
    }
    // stage one: per-scale spatial mask from channel statistics
    let spatial: Vec<ValId> = if mode == BridgeMode::ChannelOnly {
        scales.to_vec() // mask forced to one
    } else {
        let mut out = Vec::with_capacity(scales.len());
        for &t in scales {
            let mean = tape.chan_mean(t);
            let mx = tape.chan_max(t);
            let cat = tape.concat(&[mean, mx], 1)?;
            let pre = tape.conv3d(cat, ids[h.spatial_w.0], Some(ids[h.spatial_b.0]), 1, SPATIAL_PAD, 1)?;
            let mask = tape.sigmoid(pre);
            out.push(tape.spatial_mul(t, mask)?);
        }
        out
    };
    let alpha = tape.softplus(ids[h.alpha_raw.0]);
    let beta = tape.softplus(ids[h.beta_raw.0]);
    // stage two: channel gates from statistics pooled across every scale
    let gated: Option<Vec<ValId>> = if mode == BridgeMode::SpatialOnly {
        None
    } else {
        let pooled: Vec<ValId> = spatial.iter().map(|&t| tape.gap(t)).collect();
        let z = tape.concat(&pooled, 1)?;
        let mut out = Vec::with_capacity(scales.len());
        for (s, &tsp) in spatial.iter().enumerate() {
            let (w, b) = h.gates[s];
            let pre = tape.matmul(z, ids[w.0], Some(ids[b.0]))?;
            let gate = tape.sigmoid(pre);
            out.push(tape.channel_mul(tsp, gate)?);
        }
        Some(out)
    };
    let mut fused = Vec::with_capacity(scales.len());
    for (s, &t) in scales.iter().enumerate() {
        let mut acc = t;
        if mode != BridgeMode::ChannelOnly {
            let aterm = tape.mul_scalar(spatial[s], alpha)?;
            acc = tape.add(acc, aterm)?;
        }
        if let Some(gated) = &gated {
            let bterm = tape.mul_scalar(gated[s], beta)?;
            acc = tape.add(acc, bterm)?;
        }
        fused.push(acc);
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::max_rel_err;
    use rand::{Rng, SeedableRng};

    fn rand_t(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn build(channels: &[usize], seed: u64) -> (ParamStore<f64>, BridgeHandles) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = define(&mut store, &mut rng, "bridge", channels, Bucket::Other).unwrap();
        (store, h)
    }

    fn run(
        store: &ParamStore<f64>,
        h: &BridgeHandles,
        mode: BridgeMode,
        inputs: &[Tensor<f64>],
    ) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let ids = store.leaf_all(&mut tape, false);
        let sids: Vec<ValId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = forward(&mut tape, &ids, h, mode, &sids).unwrap();
        out.iter().map(|&id| tape.val(id).clone()).collect()
    }

    #[test]
    fn param_count_matches_store() {
        let (store, _) = build(&[4, 8, 12], 40);
        assert_eq!(store.count(None), param_count(&[4, 8, 12]));
    }

    #[test]
    fn zeroed_params_halve_through_both_gates() {
        // zero spatial kernel -> mask 0.5; zero gate weights -> g 0.5;
        // fused = t*(1 + 0.5a + 0.25b)
        let (mut store, h) = build(&[3], 41);
        let zero_names = ["bridge.spatial.w", "bridge.gate0.w"];
        for n in zero_names {
            let idx = store.find(n).unwrap();
            let t = &mut store.get_mut(idx).tensor;
            *t = Tensor::zeros(t.dims().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_t(&[2, 3, 4, 4, 4], &mut rng);
        let out = run(&store, &h, BridgeMode::Full, std::slice::from_ref(&x));
        let a = ops::softplus(ops::softplus_inv(0.1));
        let scale = 1.0 + 0.5 * a + 0.25 * a;
        for (y, x) in out[0].data().iter().zip(x.data()) {
            assert!((y - scale * x).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_hand_value() {
        // pooled statistic 0.3 through unit weight, zero bias
        assert!((ops::sigmoid_gate(0.3) - 0.5744).abs() < 1e-4);
    }

    #[test]
    fn zero_alpha_beta_is_exact_identity() {
        let (mut store, h) = build(&[2, 4], 43);
        for n in ["bridge.alpha_raw", "bridge.beta_raw"] {
            let idx = store.find(n).unwrap();
            store.get_mut(idx).tensor = Tensor::full(vec![1], -1e3); // softplus underflows to 0
        }
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let xs = [rand_t(&[1, 2, 4, 4, 4], &mut rng), rand_t(&[1, 4, 2, 2, 2], &mut rng)];
        let out = run(&store, &h, BridgeMode::Full, &xs);
        for (o, x) in out.iter().zip(&xs) {
            assert_eq!(o.data(), x.data());
        }
    }

    #[test]
    fn off_mode_is_identity_without_touching_params() {
        let (store, h) = build(&[2, 4], 45);
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let xs = [rand_t(&[1, 2, 4, 4, 4], &mut rng), rand_t(&[1, 4, 2, 2, 2], &mut rng)];
        let out = run(&store, &h, BridgeMode::Off, &xs);
        for (o, x) in out.iter().zip(&xs) {
            assert_eq!(o.data(), x.data());
        }
    }

    #[test]
    fn pointwise_residual_bound_holds() {
        // every voxel obeys |fused| <= (1 + alpha + beta) |skip|
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for trial in 0..100 {
            let (mut store, h) = build(&[3, 5], 100 + trial);
            // randomize the residual scales upward so the bound is exercised
            for n in ["bridge.alpha_raw", "bridge.beta_raw"] {
                let idx = store.find(n).unwrap();
                store.get_mut(idx).tensor = Tensor::full(vec![1], 3.0 * rng.random::<f64>() - 1.0);
            }
            let alpha = ops::softplus(store.get(store.find("bridge.alpha_raw").unwrap()).tensor.data()[0]);
            let beta = ops::softplus(store.get(store.find("bridge.beta_raw").unwrap()).tensor.data()[0]);
            let xs = [rand_t(&[1, 3, 2, 4, 4], &mut rng), rand_t(&[1, 5, 1, 2, 2], &mut rng)];
            let out = run(&store, &h, BridgeMode::Full, &xs);
            let cap = 1.0 + alpha + beta;
            for (o, x) in out.iter().zip(&xs) {
                for (y, v) in o.data().iter().zip(x.data()) {
                    assert!(
                        y.abs() <= cap * v.abs() * (1.0 + 1e-9),
                        "trial {trial}: |{y}| > {cap}*|{v}|"
                    );
                }
            }
        }
    }

    #[test]
    fn matches_composition_oracle() {
        // rebuild the full bridge from standalone primitives on plain tensors
        let (store, h) = build(&[3], 48);
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let x = rand_t(&[1, 3, 4, 4, 4], &mut rng);
        let out = run(&store, &h, BridgeMode::Full, std::slice::from_ref(&x));

        let get = |n: &str| store.get(store.find(n).unwrap()).tensor.clone();
        let mean = ops::chan_mean(&x);
        let (mx, _) = ops::chan_max(&x);
        let mut cat = Tensor::zeros(vec![1, 2, 4, 4, 4]);
        cat.data_mut()[..64].copy_from_slice(&mean.data()[..64]);
        cat.data_mut()[64..].copy_from_slice(&mx.data()[..64]);
        let pre = crate::conv::conv3d(&cat, &get("bridge.spatial.w"), Some(&get("bridge.spatial.b")), 1, 3, 1)
            .unwrap();
        let mask = pre.map(|v| ops::sigmoid_gate(v));
        let mut tsp = x.clone();
        for c in 0..3 {
            for v in 0..64 {
                tsp.data_mut()[c * 64 + v] *= mask.data()[v];
            }
        }
        let z = ops::gap(&tsp);
        let gpre = ops::matmul_last(&z, &get("bridge.gate0.w"), Some(&get("bridge.gate0.b"))).unwrap();
        let gate = gpre.map(|v| ops::sigmoid_gate(v));
        let alpha = ops::softplus(get("bridge.alpha_raw").data()[0]);
        let beta = ops::softplus(get("bridge.beta_raw").data()[0]);
        let mut want = x.clone();
        for c in 0..3 {
            for v in 0..64 {
                let i = c * 64 + v;
                want.data_mut()[i] += alpha * tsp.data()[i] + beta * gate.data()[c] * tsp.data()[i];
            }
        }
        assert!(max_rel_err(&out[0], &want) < 1e-6);
    }

    #[test]
    fn spatial_stage_is_scale_local_and_channel_stage_is_cross_scale() {
        let (store, h) = build(&[2, 2], 50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x0 = rand_t(&[1, 2, 4, 4, 4], &mut rng);
        let x1 = rand_t(&[1, 2, 2, 2, 2], &mut rng);
        let mut x1b = x1.clone();
        for v in x1b.data_mut() {
            *v += 0.5;
        }
        // spatial stage only: scale 0 output ignores scale 1 entirely
        let base = run(&store, &h, BridgeMode::SpatialOnly, &[x0.clone(), x1.clone()]);
        let pert = run(&store, &h, BridgeMode::SpatialOnly, &[x0.clone(), x1b.clone()]);
        assert_eq!(base[0].data(), pert[0].data());
        // full bridge: the pooled statistics couple the scales
        let base = run(&store, &h, BridgeMode::Full, &[x0.clone(), x1]);
        let pert = run(&store, &h, BridgeMode::Full, &[x0, x1b]);
        assert_ne!(base[0].data(), pert[0].data());
    }

    #[test]
    fn ablation_modes_give_distinct_outputs() {
        let (store, h) = build(&[3], 52);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = rand_t(&[1, 3, 4, 4, 4], &mut rng);
        let modes = [BridgeMode::Full, BridgeMode::SpatialOnly, BridgeMode::ChannelOnly, BridgeMode::Off];
        let outs: Vec<_> = modes.iter().map(|&m| run(&store, &h, m, std::slice::from_ref(&x))).collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i][0].data(), outs[j][0].data(), "{:?} vs {:?}", modes[i], modes[j]);
            }
        }
    }

    #[test]
    fn gradients_reach_every_bridge_param() {
        let (store, h) = build(&[2, 3], 54);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let xs = [rand_t(&[1, 2, 4, 4, 4], &mut rng), rand_t(&[1, 3, 2, 2, 2], &mut rng)];
        let mut tape = Tape::new();
        let ids = store.leaf_all(&mut tape, true);
        let sids: Vec<ValId> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = forward(&mut tape, &ids, &h, BridgeMode::Full, &sids).unwrap();
        let sums: Vec<ValId> = out.iter().map(|&id| tape.sum_all(id)).collect();
        let mut total = sums[0];
        for &s in &sums[1..] {
            total = tape.add(total, s).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        for (i, id) in ids.iter().enumerate() {
            assert!(
                grads.get(*id).is_some(),
                "no gradient for {}",
                store.get(crate::params::ParamIdx(i)).name
            );
        }
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in [BridgeMode::Full, BridgeMode::SpatialOnly, BridgeMode::ChannelOnly, BridgeMode::Off] {
            assert_eq!(BridgeMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(BridgeMode::parse("both").is_err());
    }
}
