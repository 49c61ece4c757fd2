//! Whole-network assembly: a five-stage encoder whose last three stages are
//! routed expert units, one skip-bridging pass over all encoder scales, a
//! decoder that opens with three state-space mixer stages and closes with two
//! conv stages, and a pointwise classification head. Each decoder stage
//! upsamples and adds the bridged skip of the next finer scale.

use crate::bridge::{self, BridgeHandles, BridgeMode};
use crate::error::{Error, Result};
use crate::experts::{self, ExpertHandles, Route};
use crate::io::{self, Checkpoint};
use crate::mixer::{self, MixerHandles, NORM_EPS};
use crate::params::{fan_in_uniform, Bucket, ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Spatial halvings along the encoder, including the bottleneck pool.
pub const SCALES: usize = 5;
/// Input spatial dims must be divisible by this.
pub const SPATIAL_DIVISOR: usize = 1 << SCALES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Bank size M.
    pub count: usize,
    /// Experts combined per sample.
    pub top_k: usize,
    pub dropout_p: f64,
    /// Sample identifier -> 1-based expert selection (exactly top_k entries).
    pub id_table: BTreeMap<String, Vec<u32>>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { count: 1, top_k: 1, dropout_p: 0.1, id_table: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Preset name when built from one (T, S, B, L).
    pub variant: Option<String>,
    pub max_channels: usize,
    /// Encoder widths C1..C5, each divisible by groups, C5 == max_channels.
    pub channel_schedule: Vec<usize>,
    pub groups: usize,
    pub state_dim: usize,
    pub experts: ExpertConfig,
    pub bridge_mode: BridgeMode,
    pub decoder_width_multiplier: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Some("B".into()),
            max_channels: 256,
            channel_schedule: calibrated_schedule(256, 4),
            groups: 4,
            state_dim: 16,
            experts: ExpertConfig::default(),
            bridge_mode: BridgeMode::Full,
            decoder_width_multiplier: 1.0,
            in_channels: 4,
            num_classes: 4,
            seed: 0,
        }
    }
}

/// Encoder widths as fixed fractions of the channel ceiling, rounded down to
/// multiples of the group count: {1/8, 1/4, 3/8, 1/2, 1}. A plain doubling
/// ramp starves the early stages and lands the totals far outside the
/// published budget, so the ramp is flatter by design.
pub fn calibrated_schedule(max_channels: usize, groups: usize) -> Vec<usize> {
    [(1usize, 8usize), (1, 4), (3, 8), (1, 2), (1, 1)]
        .iter()
        .map(|&(num, den)| max_channels * num / (den * groups) * groups)
        .collect()
}

pub fn variant_max_channels(name: &str) -> Result<usize> {
    match name.to_ascii_uppercase().as_str() {
        "T" => Ok(128),
        "S" => Ok(196),
        "B" => Ok(256),
        "L" => Ok(384),
        other => Err(Error::Config(format!("unknown variant {other:?}, expected T, S, B, or L"))),
    }
}

impl NetworkConfig {
    pub fn for_variant(name: &str, seed: u64) -> Result<Self> {
        let max_channels = variant_max_channels(name)?;
        let groups = 4;
        Ok(NetworkConfig {
            variant: Some(name.to_ascii_uppercase()),
            max_channels,
            channel_schedule: calibrated_schedule(max_channels, groups),
            groups,
            seed,
            ..NetworkConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cs = &self.channel_schedule;
        if cs.len() != SCALES {
            return Err(Error::Config(format!("channel schedule needs {SCALES} widths, got {}", cs.len())));
        }
        if self.groups == 0 || self.state_dim == 0 {
            return Err(Error::Config("groups and state_dim must be >= 1".into()));
        }
        for (i, &c) in cs.iter().enumerate() {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} is not a positive multiple of groups {}",
                    i + 1,
                    self.groups
                )));
            }
            if i > 0 && c < cs[i - 1] {
                return Err(Error::Config("channel schedule must be nondecreasing".into()));
            }
        }
        if cs[SCALES - 1] != self.max_channels {
            return Err(Error::Config(format!(
                "deepest width {} must equal max_channels {}",
                cs[SCALES - 1],
                self.max_channels
            )));
        }
        if !(self.decoder_width_multiplier > 0.0) {
            return Err(Error::Config("decoder_width_multiplier must be positive".into()));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("need in_channels >= 1 and num_classes >= 2".into()));
        }
        Ok(())
    }

    /// Decoder block output width for a target skip width.
    fn decoder_width(&self, target: usize) -> usize {
        let g = self.groups as f64;
        let w = (self.decoder_width_multiplier * target as f64 / g).round() as usize * self.groups;
        w.max(self.groups)
    }
}

/// Plain conv stage: 3x3x3 conv, group norm, SiLU.
pub(crate) struct ConvStage {
    w: ParamIdx,
    b: ParamIdx,
    gn: (ParamIdx, ParamIdx),
}

pub(crate) fn conv_stage_define<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    bucket: Bucket,
) -> Result<ConvStage> {
    Ok(ConvStage {
        w: store.add(format!("{prefix}.w"), fan_in_uniform(rng, vec![c_out, c_in, 3, 3, 3], 27 * c_in), bucket)?,
        b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![c_out]), bucket)?,
        gn: define_gn(store, rng, prefix, c_out, bucket)?,
    })
}

pub(crate) fn define_gn<T: Scalar>(
    store: &mut ParamStore<T>,
    _rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
    bucket: Bucket,
) -> Result<(ParamIdx, ParamIdx)> {
    Ok((
        store.add(format!("{prefix}.gn.g"), Tensor::full(vec![width], T::one()), bucket)?,
        store.add(format!("{prefix}.gn.b"), Tensor::zeros(vec![width]), bucket)?,
    ))
}

pub(crate) fn conv_stage_forward<T: Scalar>(
    tape: &mut Tape<T>,
    leaves: &[ValId],
    s: &ConvStage,
    x: ValId,
    groups: usize,
) -> Result<ValId> {
    let c = tape.conv3d(x, leaves[s.w.0], Some(leaves[s.b.0]), 1, 1, 1)?;
    let n = tape.group_norm(c, groups, leaves[s.gn.0 .0], leaves[s.gn.1 .0], NORM_EPS)?;
    Ok(tape.silu(n))
}

/// Pointwise width fix used when the decoder multiplier moves a stage off its
/// skip width.
struct Adapter {
    w: ParamIdx,
    b: ParamIdx,
}

pub struct ModelState<T: Scalar> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    enc: Vec<ConvStage>,
    peu: Vec<ExpertHandles>,
    peu_gn: Vec<(ParamIdx, ParamIdx)>,
    bridge: BridgeHandles,
    dec_mix: Vec<MixerHandles>,
    dec_mix_gn: Vec<(ParamIdx, ParamIdx)>,
    dec_conv: Vec<ConvStage>,
    adapters: Vec<Option<Adapter>>,
    head: (ParamIdx, ParamIdx),
}

pub fn build<T: Scalar>(cfg: NetworkConfig) -> Result<ModelState<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cs = cfg.channel_schedule.clone();
    let (m, k, p) = (cfg.experts.count, cfg.experts.top_k, cfg.experts.dropout_p);

    let mut enc = Vec::new();
    let mut widths = vec![cfg.in_channels];
    widths.extend(cs.iter().copied());
    for i in 0..3 {
        enc.push(conv_stage_define(&mut store, &mut rng, &format!("enc{}", i + 1), widths[i], widths[i + 1], Bucket::Encoder)?);
    }
    let mut peu = Vec::new();
    let mut peu_gn = Vec::new();
    for (label, a, b) in [("peu4", cs[2], cs[3]), ("peu5", cs[3], cs[4])] {
        peu.push(experts::define(&mut store, &mut rng, label, a, b, m, k, p, Bucket::Encoder)?);
        peu_gn.push(define_gn(&mut store, &mut rng, label, b, Bucket::Encoder)?);
    }
    // the bottleneck unit feeds the first mixer stage directly, no norm
    peu.push(experts::define(&mut store, &mut rng, "peub", cs[4], cs[4], m, k, p, Bucket::Encoder)?);

    let bridge = bridge::define(&mut store, &mut rng, "bridge", &cs, Bucket::Other)?;

    // decoder stage s consumes the skip at scale 6-s; targets C5, C4, C3, C2, C1
    let targets = [cs[4], cs[3], cs[2], cs[1], cs[0]];
    let mut dec_mix = Vec::new();
    let mut dec_mix_gn = Vec::new();
    let mut dec_conv = Vec::new();
    let mut adapters = Vec::new();
    let mut c_prev = cs[4];
    for (s, &tgt) in targets.iter().enumerate() {
        let w_out = cfg.decoder_width(tgt);
        let prefix = format!("dec{}", s + 1);
        if s < 3 {
            dec_mix.push(mixer::define(&mut store, &mut rng, &format!("{prefix}.mix"), c_prev, w_out, cfg.groups, cfg.state_dim, Bucket::Decoder)?);
            dec_mix_gn.push(define_gn(&mut store, &mut rng, &prefix, w_out, Bucket::Decoder)?);
        } else {
            dec_conv.push(conv_stage_define(&mut store, &mut rng, &prefix, c_prev, w_out, Bucket::Decoder)?);
        }
        adapters.push(if w_out != tgt {
            Some(Adapter {
                w: store.add(format!("{prefix}.adapt.w"), fan_in_uniform(&mut rng, vec![tgt, w_out, 1, 1, 1], w_out), Bucket::Decoder)?,
                b: store.add(format!("{prefix}.adapt.b"), Tensor::zeros(vec![tgt]), Bucket::Decoder)?,
            })
        } else {
            None
        });
        c_prev = tgt;
    }
    let head = (
        store.add("head.w", fan_in_uniform(&mut rng, vec![cfg.num_classes, cs[0], 1, 1, 1], cs[0]), Bucket::Other)?,
        store.add("head.b", Tensor::zeros(vec![cfg.num_classes]), Bucket::Other)?,
    );

    Ok(ModelState { cfg, store, enc, peu, peu_gn, bridge, dec_mix, dec_mix_gn, dec_conv, adapters, head })
}

impl<T: Scalar> ModelState<T> {
    pub fn route_for(&self, ids: &[String]) -> Result<Route> {
        experts::route_from_ids(ids, &self.cfg.experts.id_table, self.cfg.experts.count, self.cfg.experts.top_k)
    }

    /// Runs the whole network and returns class logits at input resolution.
    /// `leaves` must come from `store.leaf_all` on the same tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        leaves: &[ValId],
        x: ValId,
        route: &Route,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ValId> {
        let dims = tape.dims(x).to_vec();
        if dims.len() != 5 {
            return Err(Error::shape(format!("input must be rank 5, got rank {}", dims.len())));
        }
        if dims[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, network expects {}",
                dims[1], self.cfg.in_channels
            )));
        }
        for &d in &dims[2..] {
            if d == 0 || d % SPATIAL_DIVISOR != 0 {
                return Err(Error::shape(format!(
                    "spatial dims {:?} must be positive multiples of {SPATIAL_DIVISOR}",
                    &dims[2..]
                )));
            }
        }
        let g = self.cfg.groups;

        let t1 = conv_stage_forward(tape, leaves, &self.enc[0], x, g)?;
        let p1 = tape.max_pool(t1)?;
        let t2 = conv_stage_forward(tape, leaves, &self.enc[1], p1, g)?;
        let p2 = tape.max_pool(t2)?;
        let t3 = conv_stage_forward(tape, leaves, &self.enc[2], p2, g)?;
        let p3 = tape.max_pool(t3)?;
        let u4 = experts::forward(tape, leaves, &self.peu[0], p3, route, training, rng)?;
        let t4 = tape.group_norm(u4, g, leaves[self.peu_gn[0].0 .0], leaves[self.peu_gn[0].1 .0], NORM_EPS)?;
        let p4 = tape.max_pool(t4)?;
        let u5 = experts::forward(tape, leaves, &self.peu[1], p4, route, training, rng)?;
        let t5 = tape.group_norm(u5, g, leaves[self.peu_gn[1].0 .0], leaves[self.peu_gn[1].1 .0], NORM_EPS)?;
        let p5 = tape.max_pool(t5)?;
        let b = experts::forward(tape, leaves, &self.peu[2], p5, route, training, rng)?;

        let skips = bridge::forward(tape, leaves, &self.bridge, self.cfg.bridge_mode, &[t1, t2, t3, t4, t5])?;

        let mut y = b;
        for s in 0..SCALES {
            y = if s < 3 {
                let mixed = mixer::forward(tape, leaves, &self.dec_mix[s], y)?;
                let gn = &self.dec_mix_gn[s];
                tape.group_norm(mixed, g, leaves[gn.0 .0], leaves[gn.1 .0], NORM_EPS)?
            } else {
                conv_stage_forward(tape, leaves, &self.dec_conv[s - 3], y, g)?
            };
            if let Some(a) = &self.adapters[s] {
                y = tape.conv3d(y, leaves[a.w.0], Some(leaves[a.b.0]), 1, 0, 1)?;
            }
            y = tape.upsample(y);
            y = tape.add(y, skips[SCALES - 1 - s])?;
        }
        tape.conv3d(y, leaves[self.head.0 .0], Some(leaves[self.head.1 .0]), 1, 0, 1)
    }

    /// Convenience inference entry: fresh tape, frozen leaves, no dropout.
    pub fn infer(&self, x: &Tensor<T>, ids: &[String]) -> Result<Tensor<T>> {
        let route = self.route_for(ids)?;
        let mut tape = Tape::new();
        let leaves = self.store.leaf_all(&mut tape, false);
        let xid = tape.leaf(x.clone(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &leaves, xid, &route, false, &mut rng)?;
        Ok(tape.val(out).clone())
    }

    pub fn param_report(&self) -> ParamReport {
        let encoder = self.store.count(Some(Bucket::Encoder));
        let decoder = self.store.count(Some(Bucket::Decoder));
        let other = self.store.count(Some(Bucket::Other));
        let total = encoder + decoder + other;
        let pct = |n: usize| 100.0 * n as f64 / total as f64;
        ParamReport {
            encoder,
            decoder,
            other,
            total,
            encoder_pct: pct(encoder),
            decoder_pct: pct(decoder),
            other_pct: pct(other),
        }
    }

    pub fn config_text(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.cfg)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = Checkpoint {
            config_text: self.config_text()?,
            tensors: self.store.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect(),
        };
        io::write_checkpoint(path, &ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelState<T>> {
        let ck = io::read_checkpoint(path)?;
        let cfg: NetworkConfig = serde_json::from_str(&ck.config_text)
            .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
        let mut state = build::<T>(cfg)?;
        if ck.tensors.len() != state.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config builds {}",
                ck.tensors.len(),
                state.store.len()
            )));
        }
        for (name, t) in &ck.tensors {
            let idx = state
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor {name:?} not in model")))?;
            let dst = state.store.get_mut(idx);
            if dst.tensor.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    t.dims(),
                    dst.tensor.dims()
                )));
            }
            dst.tensor = t.cast();
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub encoder: usize,
    pub decoder: usize,
    pub other: usize,
    pub total: usize,
    pub encoder_pct: f64,
    pub decoder_pct: f64,
    pub other_pct: f64,
}
