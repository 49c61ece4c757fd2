//! Shared-plus-expert unit with hard sample-level routing. Every block
//! (shared and each expert) is a depthwise 3x3x3 conv, a pointwise channel
//! map, and a smooth x*sigmoid(x) activation; normalization is left to the
//! caller so the unit stays purely additive. A sample's output is
//! f_shared(u_i) plus the mean of its K selected experts, reassembled along
//! the batch axis.

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bucket, ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct BlockHandles {
    pub dw: ParamIdx,
    pub pw: ParamIdx,
    pub pw_b: ParamIdx,
    pub c_in: usize,
    pub c_out: usize,
}

pub fn block_define<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    bucket: Bucket,
) -> Result<BlockHandles> {
    Ok(BlockHandles {
        dw: store.add(format!("{prefix}.dw"), fan_in_uniform(rng, vec![c_in, 1, 3, 3, 3], 27), bucket)?,
        pw: store.add(format!("{prefix}.pw"), fan_in_uniform(rng, vec![c_out, c_in, 1, 1, 1], c_in), bucket)?,
        pw_b: store.add(format!("{prefix}.pw_b"), Tensor::zeros(vec![c_out]), bucket)?,
        c_in,
        c_out,
    })
}

pub fn block_param_count(c_in: usize, c_out: usize) -> usize {
    27 * c_in + c_in * c_out + c_out
}

pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[ValId],
    h: &BlockHandles,
    x: ValId,
) -> Result<ValId> {
    let dw = tape.conv3d(x, ids[h.dw.0], None, 1, 1, h.c_in)?;
    let pw = tape.conv3d(dw, ids[h.pw.0], Some(ids[h.pw_b.0]), 1, 0, 1)?;
    Ok(tape.silu(pw))
}

pub struct ExpertHandles {
    pub shared: BlockHandles,
    pub experts: Vec<BlockHandles>,
    pub top_k: usize,
    pub dropout_p: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn define<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    m: usize,
    top_k: usize,
    dropout_p: f64,
    bucket: Bucket,
) -> Result<ExpertHandles> {
    if m == 0 {
        return Err(Error::Config("expert count must be >= 1".into()));
    }
    if top_k == 0 || top_k > m {
        return Err(Error::Config(format!("top_k {top_k} must lie in 1..={m}")));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p {dropout_p} must lie in [0, 1)")));
    }
    let shared = block_define(store, rng, &format!("{prefix}.shared"), c_in, c_out, bucket)?;
    let mut experts = Vec::with_capacity(m);
    for e in 0..m {
        experts.push(block_define(store, rng, &format!("{prefix}.expert{e}"), c_in, c_out, bucket)?);
    }
    Ok(ExpertHandles { shared, experts, top_k, dropout_p })
}

/// (shared, per_expert, total); total == shared + M * per_expert exactly.
pub fn expert_param_count(h: &ExpertHandles) -> (usize, usize, usize) {
    let shared = block_param_count(h.shared.c_in, h.shared.c_out);
    let per = block_param_count(h.shared.c_in, h.shared.c_out);
    (shared, per, shared + h.experts.len() * per)
}

/// Expert selections per sample, 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub sel: Vec<Vec<u32>>,
}

impl Route {
    pub fn new(sel: Vec<Vec<u32>>, m: usize) -> Result<Self> {
        for (i, s) in sel.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Routing(format!("sample {i} selects no expert")));
            }
            for &e in s {
                if e == 0 || e as usize > m {
                    return Err(Error::Routing(format!(
                        "sample {i} routes to expert {e}, valid range is 1..={m}"
                    )));
                }
            }
        }
        Ok(Route { sel })
    }

    pub fn uniform(batch: usize, experts: &[u32], m: usize) -> Result<Self> {
        Route::new(vec![experts.to_vec(); batch], m)
    }
}

/// Looks samples up in the identifier table. Every entry must resolve to
/// exactly top_k experts; with a single expert the table is ignored.
pub fn route_from_ids(
    ids: &[String],
    table: &BTreeMap<String, Vec<u32>>,
    m: usize,
    top_k: usize,
) -> Result<Route> {
    if m == 1 {
        return Route::new(vec![vec![1]; ids.len()], 1);
    }
    let mut sel = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = table
            .get(id)
            .ok_or_else(|| Error::Routing(format!("identifier {id:?} missing from experts.id_table")))?;
        if entry.len() != top_k {
            return Err(Error::Routing(format!(
                "identifier {id:?} maps to {} experts, routing needs exactly {top_k}",
                entry.len()
            )));
        }
        sel.push(entry.clone());
    }
    Route::new(sel, m)
}

/// Runs the bank on a batch. Dropout applies only when training is set.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[ValId],
    h: &ExpertHandles,
    x: ValId,
    route: &Route,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ValId> {
    let b = tape.dims(x)[0];
    if route.sel.len() != b {
        return Err(Error::shape(format!(
            "route covers {} samples, batch has {b}",
            route.sel.len()
        )));
    }
    for s in &route.sel {
        for &e in s {
            if e == 0 || e as usize > h.experts.len() {
                return Err(Error::Routing(format!(
                    "expert {e} out of range 1..={}",
                    h.experts.len()
                )));
            }
        }
    }
    tape.stats.expert_calls += 1;
    let mut outs = Vec::with_capacity(b);
    for i in 0..b {
        let xi = tape.narrow(x, 0, i, 1)?;
        let sh = block_forward(tape, ids, &h.shared, xi)?;
        let k = route.sel[i].len();
        let mut acc: Option<ValId> = None;
        for &e in &route.sel[i] {
            let fe = block_forward(tape, ids, &h.experts[e as usize - 1], xi)?;
            acc = Some(match acc {
                None => fe,
                Some(a) => tape.add(a, fe)?,
            });
        }
        let mean = if k > 1 { tape.scale(acc.unwrap(), 1.0 / k as f64) } else { acc.unwrap() };
        outs.push(tape.add(sh, mean)?);
    }
    let cat = tape.concat(&outs, 0)?;
    if training && h.dropout_p > 0.0 {
        tape.dropout(cat, h.dropout_p, rng)
    } else {
        Ok(cat)
    }
}
