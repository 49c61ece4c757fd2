//! Training entry points: a full finite-difference gradient audit on a small
//! but complete assembly, and a toy segmentation training loop with cosine
//! learning-rate decay and plateau-based early stopping.

use crate::bridge::{self, BridgeHandles, BridgeMode};
use crate::error::{Error, Result};
use crate::experts::{self, ExpertHandles, Route};
use crate::loss;
use crate::mixer::{self, MixerHandles, NORM_EPS};
use crate::model::{self, ConvStage, ModelState};
use crate::optim::{OptimConfig, OptimState};
use crate::params::{Bucket, ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{Sample, ToyDataset};
use crate::tape::{self, Tape, ValId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Two-scale assembly with every block kind in the real network: conv stage,
/// two routed expert units (one norm-wrapped, one bottleneck), the bridge, a
/// mixer stage, a decoder conv stage, and the head. Small enough that central
/// differences over every parameter stay cheap.
pub struct Miniature {
    pub store: ParamStore<f64>,
    enc1: ConvStage,
    peu2: ExpertHandles,
    gn2: (ParamIdx, ParamIdx),
    peub: ExpertHandles,
    bridge: BridgeHandles,
    mix: MixerHandles,
    mix_gn: (ParamIdx, ParamIdx),
    dec2: ConvStage,
    head: (ParamIdx, ParamIdx),
}

pub const MINI_WIDTH: usize = 8;
pub const MINI_CLASSES: usize = 4;
const MINI_GROUPS: usize = 4;
const MINI_STATE: usize = 4;
const MINI_DROPOUT: f64 = 0.25;

pub fn build_miniature(seed: u64) -> Result<Miniature> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = MINI_WIDTH;
    let enc1 = model::conv_stage_define(&mut store, &mut rng, "enc1", 4, w, Bucket::Encoder)?;
    let peu2 = experts::define(&mut store, &mut rng, "peu2", w, w, 1, 1, MINI_DROPOUT, Bucket::Encoder)?;
    let gn2 = model::define_gn(&mut store, &mut rng, "peu2", w, Bucket::Encoder)?;
    let peub = experts::define(&mut store, &mut rng, "peub", w, w, 1, 1, MINI_DROPOUT, Bucket::Encoder)?;
    let bridge = bridge::define(&mut store, &mut rng, "bridge", &[w, w], Bucket::Other)?;
    let mix = mixer::define(&mut store, &mut rng, "dec1.mix", w, w, MINI_GROUPS, MINI_STATE, Bucket::Decoder)?;
    let mix_gn = model::define_gn(&mut store, &mut rng, "dec1", w, Bucket::Decoder)?;
    let dec2 = model::conv_stage_define(&mut store, &mut rng, "dec2", w, w, Bucket::Decoder)?;
    let head = (
        store.add("head.w", crate::params::fan_in_uniform(&mut rng, vec![MINI_CLASSES, w, 1, 1, 1], w), Bucket::Other)?,
        store.add("head.b", Tensor::zeros(vec![MINI_CLASSES]), Bucket::Other)?,
    );
    Ok(Miniature { store, enc1, peu2, gn2, peub, bridge, mix, mix_gn, dec2, head })
}

impl Miniature {
    /// Forward through every block kind, ending in the fused loss scalar.
    /// Dropout masks are drawn from `drop_seed`, so a fixed seed gives a
    /// deterministic function of the parameters.
    pub fn loss(
        &self,
        tape: &mut Tape<f64>,
        leaves: &[ValId],
        x: ValId,
        labels: &[u32],
        training: bool,
        drop_seed: u64,
    ) -> Result<ValId> {
        let g = MINI_GROUPS;
        let route = Route::uniform(tape.dims(x)[0], &[1], 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
        let t1 = model::conv_stage_forward(tape, leaves, &self.enc1, x, g)?;
        let p1 = tape.max_pool(t1)?;
        let u2 = experts::forward(tape, leaves, &self.peu2, p1, &route, training, &mut rng)?;
        let t2 = tape.group_norm(u2, g, leaves[self.gn2.0 .0], leaves[self.gn2.1 .0], NORM_EPS)?;
        let p2 = tape.max_pool(t2)?;
        let b = experts::forward(tape, leaves, &self.peub, p2, &route, training, &mut rng)?;
        let skips = bridge::forward(tape, leaves, &self.bridge, BridgeMode::Full, &[t1, t2])?;
        let mut y = mixer::forward(tape, leaves, &self.mix, b)?;
        y = tape.group_norm(y, g, leaves[self.mix_gn.0 .0], leaves[self.mix_gn.1 .0], NORM_EPS)?;
        y = tape.upsample(y);
        y = tape.add(y, skips[1])?;
        y = model::conv_stage_forward(tape, leaves, &self.dec2, y, g)?;
        y = tape.upsample(y);
        y = tape.add(y, skips[0])?;
        let logits = tape.conv3d(y, leaves[self.head.0 .0], Some(leaves[self.head.1 .0]), 1, 0, 1)?;
        tape.dice_ce(logits, labels, loss::DICE_WEIGHT, loss::CE_WEIGHT, loss::DICE_EPS)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub elements: usize,
    pub worst: f64,
    pub worst_name: String,
    pub per_param: Vec<GradcheckEntry>,
}

/// Audit comparator: worst per-element relative error with the denominator
/// floored at 1e-4, the smallest gradient magnitude a 1e-3 probe step
/// resolves to three digits. Entries below the floor are judged absolutely
/// against it.
fn audit_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Audits the analytic gradient of every miniature parameter against central
/// finite differences at 64-bit precision.
pub fn gradcheck_miniature(seed: u64, fd_step: f64) -> Result<GradcheckReport> {
    let mini = build_miniature(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let x = Tensor::new(
        vec![1, 4, 8, 8, 8],
        (0..4 * 512).map(|_| rng.random::<f64>() - 0.5).collect(),
    )?;
    let labels: Vec<u32> = (0..512).map(|_| rng.random_range(0..MINI_CLASSES as u32)).collect();

    let mut tape = Tape::new();
    let leaves = mini.store.leaf_all(&mut tape, true);
    let xid = tape.leaf(x.clone(), false);
    let l = mini.loss(&mut tape, &leaves, xid, &labels, false, 0)?;
    let grads = tape.backward(l)?;
    // Probes replay the argmax winners of the base point so every evaluation
    // stays on the branch the backward pass differentiated.
    let pins = tape.max_choices();

    let tensors: Vec<Tensor<f64>> = mini.store.iter().map(|p| p.tensor.clone()).collect();
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        t.pin_max_choices(pins.clone());
        let ids: Vec<ValId> = ts.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let xi = t.leaf(x.clone(), false);
        let lv = mini.loss(&mut t, &ids, xi, &labels, false, 0).expect("miniature forward");
        t.val(lv).item()
    };
    let numeric = tape::numeric_grad(&eval, &tensors, fd_step);

    let mut per_param = Vec::with_capacity(tensors.len());
    let mut elements = 0;
    for (i, p) in mini.store.iter().enumerate() {
        let analytic = grads
            .get(leaves[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.tensor.dims().to_vec()));
        elements += p.tensor.len();
        per_param.push(GradcheckEntry {
            name: p.name.clone(),
            rel_err: audit_rel_err(&analytic, &numeric[i]),
        });
    }
    let (worst_name, worst) = per_param
        .iter()
        .map(|e| (e.name.clone(), e.rel_err))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    Ok(GradcheckReport { params: per_param.len(), elements, worst, worst_name, per_param })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Stop as soon as held-out Dice reaches this.
    pub target_dice: Option<f64>,
    pub seed: u64,
    pub opt: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 2,
            patience: 20,
            min_delta: 1e-4,
            target_dice: None,
            seed: 0,
            opt: OptimConfig { horizon: 0, ..OptimConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

/// Clinical label values to dense class indices (4 -> 3).
pub fn class_index(label: u32, num_classes: usize) -> Result<u32> {
    let c = if label == 4 { 3 } else { label };
    if (c as usize) < num_classes {
        Ok(c)
    } else {
        Err(Error::Data(format!("label {label} outside the {num_classes}-class set")))
    }
}

fn batch_of(samples: &[&Sample], num_classes: usize) -> Result<(Tensor<f32>, Vec<u32>, Vec<String>)> {
    let dims = samples[0].volume.dims().to_vec();
    let per = samples[0].volume.len();
    let mut vol = Vec::with_capacity(per * samples.len());
    let mut labels = Vec::with_capacity(samples[0].labels.len() * samples.len());
    let mut sites = Vec::with_capacity(samples.len());
    for s in samples {
        if s.volume.dims() != dims.as_slice() {
            return Err(Error::shape("mixed volume shapes in one batch"));
        }
        vol.extend_from_slice(s.volume.data());
        for &l in &s.labels {
            labels.push(class_index(l, num_classes)?);
        }
        sites.push(s.site.clone());
    }
    let mut bdims = dims;
    bdims[0] = samples.len();
    Ok((Tensor::new(bdims, vol)?, labels, sites))
}

/// Mean over foreground classes of plain overlap Dice on argmax predictions;
/// a class absent from both volumes scores 1.
pub fn foreground_dice(pred: &[u32], gt: &[u32], num_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 1..num_classes as u32 {
        let mut inter = 0usize;
        let mut p = 0usize;
        let mut g = 0usize;
        for (&a, &b) in pred.iter().zip(gt) {
            let (pa, gb) = (a == c, b == c);
            p += pa as usize;
            g += gb as usize;
            inter += (pa && gb) as usize;
        }
        total += if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 };
    }
    total / (num_classes - 1).max(1) as f64
}

pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<u32> {
    let [b, c, d, h, w] = logits.d5();
    let sp = d * h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(b * sp);
    for bi in 0..b {
        for v in 0..sp {
            let base = bi * c * sp + v;
            let mut best = 0u32;
            let mut bv = data[base];
            for ci in 1..c {
                let x = data[base + ci * sp];
                if x > bv {
                    bv = x;
                    best = ci as u32;
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn validation_dice(state: &ModelState<f32>, val: &[Sample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Training("no held-out samples to score".into()));
    }
    let nc = state.cfg.num_classes;
    let mut sum = 0.0;
    for s in val {
        let logits = state.infer(&s.volume, &[s.site.clone()])?;
        let pred = argmax_classes(&logits);
        let gt: Vec<u32> = s.labels.iter().map(|&l| class_index(l, nc)).collect::<Result<_>>()?;
        sum += foreground_dice(&pred, &gt, nc);
    }
    Ok(sum / val.len() as f64)
}

/// Runs the loop, mutating the model in place; returns the per-epoch log.
pub fn train_toy(state: &mut ModelState<f32>, data: &ToyDataset, tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_toy_with(state, data, tc, |_| {})
}

/// Same loop with an observer called after every epoch, for live reporting.
pub fn train_toy_with(
    state: &mut ModelState<f32>,
    data: &ToyDataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let mut ocfg = tc.opt.clone();
    if ocfg.horizon == 0 {
        ocfg.horizon = tc.epochs * steps_per_epoch;
    }
    let mut opt = OptimState::new(ocfg, &state.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x00D0_0D00);
    let nc = state.cfg.num_classes;

    let mut logs = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (xb, labels, sites) = batch_of(&samples, nc)?;
            let route = state.route_for(&sites)?;
            let mut tape = Tape::new();
            let leaves = state.store.leaf_all(&mut tape, true);
            let xid = tape.leaf(xb, false);
            let logits = state.forward(&mut tape, &leaves, xid, &route, true, &mut drop_rng)?;
            let l = tape.dice_ce(logits, &labels, loss::DICE_WEIGHT, loss::CE_WEIGHT, loss::DICE_EPS)?;
            let lv = tape.val(l).item().dbl();
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "diverged at epoch {epoch}: loss {lv}"
                )));
            }
            let grads = tape.backward(l)?;
            opt.step(&mut state.store, &leaves, &grads)?;
            loss_sum += lv;
        }
        let val_dice = validation_dice(state, &data.val)?;
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            val_dice,
            lr: opt.lr(),
        });
        on_epoch(logs.last().unwrap());
        if val_dice > best + tc.min_delta {
            best = val_dice;
            stale = 0;
        } else {
            stale += 1;
        }
        if tc.target_dice.is_some_and(|t| val_dice >= t) {
            break;
        }
        if stale >= tc.patience {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ExpertConfig, NetworkConfig};
    use crate::synth::{generate, SyntheticSpec};
    use std::collections::BTreeMap;

    fn tiny_net(seed: u64, experts: ExpertConfig) -> ModelState<f32> {
        build(NetworkConfig {
            variant: None,
            max_channels: 8,
            channel_schedule: vec![4, 4, 8, 8, 8],
            groups: 4,
            state_dim: 4,
            experts,
            bridge_mode: BridgeMode::Full,
            decoder_width_multiplier: 1.0,
            in_channels: 4,
            num_classes: 4,
            seed,
        })
        .unwrap()
    }

    fn tiny_data(count: usize, val: usize) -> ToyDataset {
        generate(&SyntheticSpec {
            count,
            val_count: val,
            sites: 1,
            noise_sigma: 0.08,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn every_miniature_parameter_survives_the_audit() {
        let report = gradcheck_miniature(0, 1e-3).unwrap();
        assert!(report.params > 10);
        let mut ranked = report.per_param.clone();
        ranked.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        assert!(
            report.worst < 1e-3,
            "worst offenders: {:?}",
            ranked.iter().take(8).map(|e| (e.name.clone(), e.rel_err)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn label_mapping() {
        assert_eq!(class_index(0, 4).unwrap(), 0);
        assert_eq!(class_index(2, 4).unwrap(), 2);
        assert_eq!(class_index(4, 4).unwrap(), 3);
        assert!(class_index(3, 3).is_err());
        assert!(class_index(7, 4).is_err());
    }

    #[test]
    fn dice_helper_hand_cases() {
        // half-overlap: pred marks 2 voxels of class 1, gt marks 2, overlap 1
        let pred = vec![1, 1, 0, 0];
        let gt = vec![1, 0, 1, 0];
        let d = foreground_dice(&pred, &gt, 2);
        assert!((d - 0.5).abs() < 1e-12);
        // absent everywhere scores 1
        assert_eq!(foreground_dice(&[0, 0], &[0, 0], 2), 1.0);
        // perfect match
        assert_eq!(foreground_dice(&[1, 2, 0], &[1, 2, 0], 3), 1.0);
    }

    #[test]
    fn short_run_reduces_loss() {
        let mut state = tiny_net(3, ExpertConfig { dropout_p: 0.0, ..ExpertConfig::default() });
        let data = tiny_data(4, 2);
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 2,
            opt: OptimConfig { base_lr: 3e-3, horizon: 0, ..OptimConfig::default() },
            ..TrainConfig::default()
        };
        let logs = train_toy(&mut state, &data, &tc).unwrap();
        assert_eq!(logs.len(), 4);
        assert!(
            logs.last().unwrap().loss < logs[0].loss,
            "losses {:?}",
            logs.iter().map(|l| l.loss).collect::<Vec<_>>()
        );
        assert!(logs.windows(2).all(|w| w[1].lr < w[0].lr));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let data = tiny_data(3, 1);
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let run = || {
            let mut state = tiny_net(5, ExpertConfig::default());
            train_toy(&mut state, &data, &tc).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn routed_training_uses_the_id_table() {
        let mut table = BTreeMap::new();
        table.insert("site0".to_string(), vec![1]);
        table.insert("site1".to_string(), vec![2]);
        let mut state = tiny_net(6, ExpertConfig { count: 2, top_k: 1, dropout_p: 0.0, id_table: table });
        let data = generate(&SyntheticSpec {
            count: 2,
            val_count: 1,
            sites: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let logs = train_toy(&mut state, &data, &tc).unwrap();
        assert_eq!(logs.len(), 1);
        // an unmapped site is a routing error, caught before any step
        let data_bad = generate(&SyntheticSpec {
            count: 2,
            val_count: 1,
            sites: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut state2 = state;
        assert!(train_toy(&mut state2, &data_bad, &tc).is_err());
    }

    #[test]
    fn poisoned_parameters_abort_with_diagnostic() {
        let mut state = tiny_net(7, ExpertConfig::default());
        let idx = state.store.find("enc1.w").unwrap();
        state.store.get_mut(idx).tensor = state.store.get(idx).tensor.map(|_| f32::NAN);
        let data = tiny_data(2, 1);
        let tc = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        match train_toy(&mut state, &data, &tc) {
            Err(Error::Training(msg)) => assert!(msg.contains("diverged")),
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn early_stopping_paths() {
        let data = tiny_data(2, 1);
        // target reached immediately: any dice >= 0
        let mut state = tiny_net(8, ExpertConfig::default());
        let tc = TrainConfig { epochs: 10, batch_size: 2, target_dice: Some(0.0), ..TrainConfig::default() };
        assert_eq!(train_toy(&mut state, &data, &tc).unwrap().len(), 1);
        // plateau: nothing can improve by 2.0, so patience 1 stops after epoch 2
        let mut state = tiny_net(9, ExpertConfig::default());
        let tc = TrainConfig { epochs: 10, batch_size: 2, patience: 1, min_delta: 2.0, ..TrainConfig::default() };
        assert_eq!(train_toy(&mut state, &data, &tc).unwrap().len(), 2);
    }
}
