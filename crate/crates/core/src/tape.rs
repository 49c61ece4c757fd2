//! Reverse-mode differentiation tape. Forward calls execute eagerly, record
//! one node per produced value, and `backward` walks nodes in reverse record
//! order, which is a valid reverse topological order because every input id
//! precedes its consumer.

use crate::error::{Error, Result};
use crate::loss;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::conv;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValId(pub(crate) usize);

/// Instrumentation for the forward-contract checks: how many times each
/// structural block ran during one network forward.
#[derive(Default, Clone, Debug, PartialEq, Eq)]
pub struct ForwardStats {
    pub mixer_calls: usize,
    pub bridge_calls: usize,
    pub expert_calls: usize,
}

enum Node<T: Scalar> {
    Leaf,
    Add(ValId, ValId),
    Scale(ValId, f64),
    Mul(ValId, ValId),
    MulScalar { x: ValId, s: ValId },
    RowScale { w: ValId, s: ValId },
    Sigmoid(ValId),
    Silu(ValId),
    Softplus(ValId),
    Exp(ValId),
    E1m(ValId),
    MatMul { x: ValId, w: ValId, b: Option<ValId> },
    LayerNorm { x: ValId, gain: ValId, bias: ValId, eps: f64 },
    GroupNorm { x: ValId, gain: ValId, bias: ValId, groups: usize, eps: f64 },
    Conv3d { x: ValId, w: ValId, b: Option<ValId>, stride: usize, pad: usize, groups: usize },
    MaxPool { x: ValId, arg: Vec<u32> },
    Upsample(ValId),
    SsmScan { x: ValId, abar: ValId, bbar: ValId, cout: ValId, h: Tensor<T> },
    Narrow { x: ValId, dim: usize, start: usize, len: usize },
    Concat { parts: Vec<ValId>, dim: usize },
    Gap(ValId),
    ChanMean(ValId),
    ChanMax { x: ValId, arg: Vec<u32> },
    SpatialMul { x: ValId, m: ValId },
    ChannelMul { x: ValId, v: ValId },
    Dropout { x: ValId, keep: Vec<bool>, p: f64 },
    VolToSeq(ValId),
    SeqToVol { x: ValId },
    SumAll(ValId),
    DiceCe { logits: ValId, labels: Vec<u32>, w_dice: f64, w_ce: f64, eps: f64 },
}

pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    requires: Vec<bool>,
    pins: Option<MaxChoices>,
    pub stats: ForwardStats,
}

/// Argmax winners of every max pool and channel max node, in creation order.
/// Backward differentiates the smooth branch these winners select; a forward
/// rebuilt with the choices pinned evaluates that same branch, which keeps
/// finite-difference probes from stepping across a winner switch.
#[derive(Clone, Debug, Default)]
pub struct MaxChoices {
    pools: Vec<Vec<u32>>,
    chans: Vec<Vec<u32>>,
}

pub struct Grads<T: Scalar> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ValId) -> Option<&Tensor<T>> {
        self.g[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValId) -> Option<Tensor<T>> {
        self.g[id.0].take()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            requires: Vec::new(),
            pins: None,
            stats: ForwardStats::default(),
        }
    }

    /// Snapshots the winners recorded by every max-style node so far.
    pub fn max_choices(&self) -> MaxChoices {
        let mut mc = MaxChoices::default();
        for n in &self.nodes {
            match n {
                Node::MaxPool { arg, .. } => mc.pools.push(arg.clone()),
                Node::ChanMax { arg, .. } => mc.chans.push(arg.clone()),
                _ => {}
            }
        }
        mc
    }

    /// Future max pool / channel max nodes reuse these winners (consumed in
    /// creation order) instead of recomputing the argmax.
    pub fn pin_max_choices(&mut self, mut mc: MaxChoices) {
        mc.pools.reverse();
        mc.chans.reverse();
        self.pins = Some(mc);
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> ValId {
        self.push(t, Node::Leaf, requires_grad)
    }

    pub fn val(&self, id: ValId) -> &Tensor<T> {
        &self.vals[id.0]
    }

    pub fn dims(&self, id: ValId) -> &[usize] {
        self.vals[id.0].dims()
    }

    fn push(&mut self, t: Tensor<T>, node: Node<T>, req: bool) -> ValId {
        self.vals.push(t);
        self.nodes.push(node);
        self.requires.push(req);
        ValId(self.vals.len() - 1)
    }

    fn req(&self, ids: &[ValId]) -> bool {
        ids.iter().any(|id| self.requires[id.0])
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut out = self.vals[a.0].clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o += x;
        }
        Ok(self.push(out, Node::Add(a, b), self.req(&[a, b])))
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(v.dbl() * c));
        let req = self.req(&[x]);
        self.push(out, Node::Scale(x, c), req)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul shape mismatch"));
        }
        let mut out = self.vals[a.0].clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o *= x;
        }
        Ok(self.push(out, Node::Mul(a, b), self.req(&[a, b])))
    }

    /// y = s * x with s a one-element value.
    pub fn mul_scalar(&mut self, x: ValId, s: ValId) -> Result<ValId> {
        if self.vals[s.0].len() != 1 {
            return Err(Error::shape("mul_scalar expects a one-element scale"));
        }
        let sv = self.vals[s.0].item();
        let out = self.vals[x.0].map(|v| v * sv);
        let req = self.req(&[x, s]);
        Ok(self.push(out, Node::MulScalar { x, s }, req))
    }

    /// y[i, j] = w[i, j] * s[i] for a rank-2 w and rank-1 s.
    pub fn row_scale(&mut self, w: ValId, s: ValId) -> Result<ValId> {
        let [r, c] = self.vals[w.0].d2();
        if self.vals[s.0].len() != r {
            return Err(Error::shape("row_scale length mismatch"));
        }
        let mut out = self.vals[w.0].clone();
        {
            let sv = self.vals[s.0].data();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] *= sv[i];
                }
            }
        }
        let req = self.req(&[w, s]);
        Ok(self.push(out, Node::RowScale { w, s }, req))
    }

    /// Gate sigmoid (fault-injectable).
    pub fn sigmoid(&mut self, x: ValId) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(ops::sigmoid_gate(v.dbl())));
        let req = self.req(&[x]);
        self.push(out, Node::Sigmoid(x), req)
    }

    pub fn silu(&mut self, x: ValId) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(ops::silu(v.dbl())));
        let req = self.req(&[x]);
        self.push(out, Node::Silu(x), req)
    }

    pub fn softplus(&mut self, x: ValId) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(ops::softplus(v.dbl())));
        let req = self.req(&[x]);
        self.push(out, Node::Softplus(x), req)
    }

    pub fn exp(&mut self, x: ValId) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(v.dbl().exp()));
        let req = self.req(&[x]);
        self.push(out, Node::Exp(x), req)
    }

    pub fn e1m(&mut self, x: ValId) -> ValId {
        let out = self.vals[x.0].map(|v| T::of(ops::e1m(v.dbl())));
        let req = self.req(&[x]);
        self.push(out, Node::E1m(x), req)
    }

    pub fn matmul(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> Result<ValId> {
        let out = ops::matmul_last(&self.vals[x.0], &self.vals[w.0], b.map(|id| &self.vals[id.0]))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let req = self.req(&ins);
        Ok(self.push(out, Node::MatMul { x, w, b }, req))
    }

    pub fn layer_norm(&mut self, x: ValId, gain: ValId, bias: ValId, eps: f64) -> Result<ValId> {
        let out = ops::layer_norm(&self.vals[x.0], &self.vals[gain.0], &self.vals[bias.0], eps)?;
        let req = self.req(&[x, gain, bias]);
        Ok(self.push(out, Node::LayerNorm { x, gain, bias, eps }, req))
    }

    pub fn group_norm(&mut self, x: ValId, groups: usize, gain: ValId, bias: ValId, eps: f64) -> Result<ValId> {
        let out = ops::group_norm(&self.vals[x.0], groups, &self.vals[gain.0], &self.vals[bias.0], eps)?;
        let req = self.req(&[x, gain, bias]);
        Ok(self.push(out, Node::GroupNorm { x, gain, bias, groups, eps }, req))
    }

    pub fn conv3d(
        &mut self,
        x: ValId,
        w: ValId,
        b: Option<ValId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<ValId> {
        let out = conv::conv3d(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|id| &self.vals[id.0]),
            stride,
            pad,
            groups,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let req = self.req(&ins);
        Ok(self.push(out, Node::Conv3d { x, w, b, stride, pad, groups }, req))
    }

    pub fn max_pool(&mut self, x: ValId) -> Result<ValId> {
        let pinned = self.pins.as_mut().and_then(|p| p.pools.pop());
        let (out, arg) = match pinned {
            Some(arg) => (conv::max_pool_pinned(&self.vals[x.0], &arg)?, arg),
            None => conv::max_pool(&self.vals[x.0])?,
        };
        let req = self.req(&[x]);
        Ok(self.push(out, Node::MaxPool { x, arg }, req))
    }

    pub fn upsample(&mut self, x: ValId) -> ValId {
        let out = conv::upsample(&self.vals[x.0]);
        let req = self.req(&[x]);
        self.push(out, Node::Upsample(x), req)
    }

    pub fn ssm_scan(&mut self, x: ValId, abar: ValId, bbar: ValId, cout: ValId) -> Result<ValId> {
        let save = self.req(&[x, abar, bbar, cout]);
        let (y, h) = ops::ssm_scan_kernel(
            &self.vals[x.0],
            &self.vals[abar.0],
            &self.vals[bbar.0],
            &self.vals[cout.0],
            save,
        )?;
        let h = h.unwrap_or_else(|| Tensor::scalar(T::zero()));
        Ok(self.push(y, Node::SsmScan { x, abar, bbar, cout, h }, save))
    }

    pub fn narrow(&mut self, x: ValId, dim: usize, start: usize, len: usize) -> Result<ValId> {
        let xd = self.vals[x.0].dims();
        if dim >= xd.len() || start + len > xd[dim] || len == 0 {
            return Err(Error::shape(format!(
                "narrow dim {dim} [{start}..{}) out of range for {xd:?}",
                start + len
            )));
        }
        let mut dims = xd.to_vec();
        dims[dim] = len;
        let outer: usize = xd[..dim].iter().product();
        let inner: usize = xd[dim + 1..].iter().product();
        let src_stride = xd[dim] * inner;
        let mut out = Tensor::zeros(dims);
        {
            let src = self.vals[x.0].data();
            let dst = out.data_mut();
            for o in 0..outer {
                let s = o * src_stride + start * inner;
                dst[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(out, Node::Narrow { x, dim, start, len }, req))
    }

    pub fn concat(&mut self, parts: &[ValId], dim: usize) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts"));
        }
        let first = self.vals[parts[0].0].dims().to_vec();
        if dim >= first.len() {
            return Err(Error::shape("concat dim out of range"));
        }
        let mut total = 0usize;
        for p in parts {
            let pd = self.vals[p.0].dims();
            if pd.len() != first.len()
                || pd.iter().enumerate().any(|(i, &v)| i != dim && v != first[i])
            {
                return Err(Error::shape(format!("concat parts disagree: {:?} vs {:?}", pd, first)));
            }
            total += pd[dim];
        }
        let mut dims = first.clone();
        dims[dim] = total;
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out = Tensor::zeros(dims);
        {
            let dst = out.data_mut();
            let mut off = 0usize;
            for p in parts {
                let pd = self.vals[p.0].dims()[dim];
                let src = self.vals[p.0].data();
                for o in 0..outer {
                    let d0 = o * total * inner + off * inner;
                    dst[d0..d0 + pd * inner].copy_from_slice(&src[o * pd * inner..(o + 1) * pd * inner]);
                }
                off += pd;
            }
        }
        let req = self.req(parts);
        Ok(self.push(out, Node::Concat { parts: parts.to_vec(), dim }, req))
    }

    pub fn gap(&mut self, x: ValId) -> ValId {
        let out = ops::gap(&self.vals[x.0]);
        let req = self.req(&[x]);
        self.push(out, Node::Gap(x), req)
    }

    pub fn chan_mean(&mut self, x: ValId) -> ValId {
        let out = ops::chan_mean(&self.vals[x.0]);
        let req = self.req(&[x]);
        self.push(out, Node::ChanMean(x), req)
    }

    pub fn chan_max(&mut self, x: ValId) -> ValId {
        let pinned = self.pins.as_mut().and_then(|p| p.chans.pop());
        let (out, arg) = match pinned {
            Some(arg) => {
                let out = ops::chan_max_pinned(&self.vals[x.0], &arg)
                    .expect("pinned channel winners must match the graph");
                (out, arg)
            }
            None => ops::chan_max(&self.vals[x.0]),
        };
        let req = self.req(&[x]);
        self.push(out, Node::ChanMax { x, arg }, req)
    }

    /// y = x * m with m shaped (B, 1, D, H, W), broadcast over channels.
    pub fn spatial_mul(&mut self, x: ValId, m: ValId) -> Result<ValId> {
        let [b, c, d, h, w] = self.vals[x.0].d5();
        if self.vals[m.0].dims() != [b, 1, d, h, w] {
            return Err(Error::shape(format!(
                "spatial mask dims {:?} incompatible with volume {:?}",
                self.vals[m.0].dims(),
                self.vals[x.0].dims()
            )));
        }
        let sp = d * h * w;
        let mut out = self.vals[x.0].clone();
        {
            let ms = self.vals[m.0].data();
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    for s in 0..sp {
                        od[(bi * c + ci) * sp + s] *= ms[bi * sp + s];
                    }
                }
            }
        }
        let req = self.req(&[x, m]);
        Ok(self.push(out, Node::SpatialMul { x, m }, req))
    }

    /// y = x * v with v shaped (B, C), broadcast over spatial axes.
    pub fn channel_mul(&mut self, x: ValId, v: ValId) -> Result<ValId> {
        let [b, c, d, h, w] = self.vals[x.0].d5();
        if self.vals[v.0].dims() != [b, c] {
            return Err(Error::shape("channel gate dims incompatible with volume"));
        }
        let sp = d * h * w;
        let mut out = self.vals[x.0].clone();
        {
            let vs = self.vals[v.0].data();
            let od = out.data_mut();
            for i in 0..b * c {
                let g = vs[i];
                for s in 0..sp {
                    od[i * sp + s] *= g;
                }
            }
        }
        let req = self.req(&[x, v]);
        Ok(self.push(out, Node::ChannelMul { x, v }, req))
    }

    /// Inverted dropout; mask draw order is element order (sample-major,
    /// voxel-minor). Caller decides training/inference by not recording the
    /// node at inference.
    pub fn dropout(&mut self, x: ValId, p: f64, rng: &mut ChaCha8Rng) -> Result<ValId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout p must be in [0,1), got {p}")));
        }
        let keep: Vec<bool> = (0..self.vals[x.0].len()).map(|_| rng.random::<f64>() >= p).collect();
        let scale = 1.0 / (1.0 - p);
        let mut out = self.vals[x.0].clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o = if k { T::of(o.dbl() * scale) } else { T::zero() };
        }
        let req = self.req(&[x]);
        Ok(self.push(out, Node::Dropout { x, keep, p }, req))
    }

    pub fn vol_to_seq(&mut self, x: ValId) -> ValId {
        let out = tensor::vol_to_seq(&self.vals[x.0]);
        let req = self.req(&[x]);
        self.push(out, Node::VolToSeq(x), req)
    }

    pub fn seq_to_vol(&mut self, x: ValId, spatial: [usize; 3]) -> Result<ValId> {
        let out = tensor::seq_to_vol(&self.vals[x.0], spatial)?;
        let req = self.req(&[x]);
        Ok(self.push(out, Node::SeqToVol { x }, req))
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let mut acc = 0.0;
        for &v in self.vals[x.0].data() {
            acc += v.dbl();
        }
        let req = self.req(&[x]);
        self.push(Tensor::scalar(T::of(acc)), Node::SumAll(x), req)
    }

    /// Combined soft-Dice + cross-entropy loss over softmax probabilities.
    /// labels holds one class index per voxel, shaped (B, D, H, W) flat.
    pub fn dice_ce(
        &mut self,
        logits: ValId,
        labels: &[u32],
        w_dice: f64,
        w_ce: f64,
        eps: f64,
    ) -> Result<ValId> {
        let [b, k, d, h, w] = self.vals[logits.0].d5();
        if labels.len() != b * d * h * w {
            return Err(Error::shape(format!(
                "labels length {} != voxel count {}",
                labels.len(),
                b * d * h * w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let v = loss::dice_ce_value(&self.vals[logits.0], labels, w_dice, w_ce, eps);
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::of(v)),
            Node::DiceCe { logits, labels: labels.to_vec(), w_dice, w_ce, eps },
            req,
        ))
    }

    pub fn backward(&self, loss: ValId) -> Result<Grads<T>> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        if !self.requires[loss.0] {
            return Err(Error::Training("backward root does not depend on any trainable leaf".into()));
        }
        let mut g: Vec<Option<Tensor<T>>> = (0..self.vals.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..self.nodes.len()).rev() {
            if g[i].is_none() || !self.requires[i] {
                continue;
            }
            let gy = g[i].take().unwrap();
            self.step_back(ValId(i), &gy, &mut g);
            g[i] = Some(gy);
        }
        Ok(Grads { g })
    }

    fn acc<'a>(&self, g: &'a mut Vec<Option<Tensor<T>>>, id: ValId) -> &'a mut Tensor<T> {
        let slot = &mut g[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.vals[id.0].dims().to_vec()));
        }
        slot.as_mut().unwrap()
    }

    fn want(&self, id: ValId) -> bool {
        self.requires[id.0]
    }

    fn step_back(&self, out: ValId, gy: &Tensor<T>, g: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[out.0] {
            Node::Leaf => {}
            Node::Add(a, b) => {
                for id in [*a, *b] {
                    if self.want(id) {
                        let ga = self.acc(g, id);
                        for (o, &v) in ga.data_mut().iter_mut().zip(gy.data()) {
                            *o += v;
                        }
                    }
                }
            }
            Node::Scale(x, c) => {
                if self.want(*x) {
                    let gx = self.acc(g, *x);
                    for (o, &v) in gx.data_mut().iter_mut().zip(gy.data()) {
                        *o += T::of(v.dbl() * c);
                    }
                }
            }
            Node::Mul(a, b) => {
                if self.want(*a) {
                    let bv = self.vals[b.0].clone();
                    let ga = self.acc(g, *a);
                    for ((o, &v), &bx) in ga.data_mut().iter_mut().zip(gy.data()).zip(bv.data()) {
                        *o += v * bx;
                    }
                }
                if self.want(*b) {
                    let av = self.vals[a.0].clone();
                    let gb = self.acc(g, *b);
                    for ((o, &v), &ax) in gb.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        *o += v * ax;
                    }
                }
            }
            Node::MulScalar { x, s } => {
                let sv = self.vals[s.0].item();
                if self.want(*x) {
                    let gx = self.acc(g, *x);
                    for (o, &v) in gx.data_mut().iter_mut().zip(gy.data()) {
                        *o += v * sv;
                    }
                }
                if self.want(*s) {
                    let mut acc = 0.0;
                    for (&xv, &v) in self.vals[x.0].data().iter().zip(gy.data()) {
                        acc += xv.dbl() * v.dbl();
                    }
                    self.acc(g, *s).data_mut()[0] += T::of(acc);
                }
            }
            Node::RowScale { w, s } => {
                let [r, c] = self.vals[w.0].d2();
                if self.want(*w) {
                    let sv = self.vals[s.0].clone();
                    let gw = self.acc(g, *w);
                    for i in 0..r {
                        for j in 0..c {
                            gw.data_mut()[i * c + j] += gy.data()[i * c + j] * sv.data()[i];
                        }
                    }
                }
                if self.want(*s) {
                    let wv = self.vals[w.0].clone();
                    let gs = self.acc(g, *s);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += wv.data()[i * c + j].dbl() * gy.data()[i * c + j].dbl();
                        }
                        gs.data_mut()[i] += T::of(acc);
                    }
                }
            }
            Node::Sigmoid(x) => {
                if self.want(*x) {
                    let yv = self.vals[out.0].clone();
                    let gx = self.acc(g, *x);
                    for ((o, &v), &y) in gx.data_mut().iter_mut().zip(gy.data()).zip(yv.data()) {
                        let yd = y.dbl();
                        *o += T::of(v.dbl() * yd * (1.0 - yd));
                    }
                }
            }
            Node::Silu(x) => {
                if self.want(*x) {
                    let xv = self.vals[x.0].clone();
                    let gx = self.acc(g, *x);
                    for ((o, &v), &xi) in gx.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        *o += T::of(v.dbl() * ops::silu_grad(xi.dbl()));
                    }
                }
            }
            Node::Softplus(x) => {
                if self.want(*x) {
                    let xv = self.vals[x.0].clone();
                    let gx = self.acc(g, *x);
                    for ((o, &v), &xi) in gx.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        *o += T::of(v.dbl() * ops::sigmoid_raw(xi.dbl()));
                    }
                }
            }
            Node::Exp(x) => {
                if self.want(*x) {
                    let yv = self.vals[out.0].clone();
                    let gx = self.acc(g, *x);
                    for ((o, &v), &y) in gx.data_mut().iter_mut().zip(gy.data()).zip(yv.data()) {
                        *o += v * y;
                    }
                }
            }
            Node::E1m(x) => {
                if self.want(*x) {
                    let xv = self.vals[x.0].clone();
                    let gx = self.acc(g, *x);
                    for ((o, &v), &xi) in gx.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        *o += T::of(v.dbl() * ops::e1m_grad(xi.dbl()));
                    }
                }
            }
            Node::MatMul { x, w, b } => {
                let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                let mut dw = Tensor::zeros(self.vals[w.0].dims().to_vec());
                let mut db = b.map(|id| Tensor::zeros(self.vals[id.0].dims().to_vec()));
                ops::matmul_last_backward(&self.vals[x.0], &self.vals[w.0], gy, &mut dx, &mut dw, db.as_mut());
                if self.want(*x) {
                    add_into(self.acc(g, *x), &dx);
                }
                if self.want(*w) {
                    add_into(self.acc(g, *w), &dw);
                }
                if let (Some(bid), Some(db)) = (b, db) {
                    if self.want(*bid) {
                        add_into(self.acc(g, *bid), &db);
                    }
                }
            }
            Node::LayerNorm { x, gain, bias, eps } => {
                let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                let mut dg = Tensor::zeros(self.vals[gain.0].dims().to_vec());
                let mut db = Tensor::zeros(self.vals[bias.0].dims().to_vec());
                ops::layer_norm_backward(
                    &self.vals[x.0],
                    &self.vals[gain.0],
                    *eps,
                    gy,
                    &mut dx,
                    Some(&mut dg),
                    Some(&mut db),
                );
                if self.want(*x) {
                    add_into(self.acc(g, *x), &dx);
                }
                if self.want(*gain) {
                    add_into(self.acc(g, *gain), &dg);
                }
                if self.want(*bias) {
                    add_into(self.acc(g, *bias), &db);
                }
            }
            Node::GroupNorm { x, gain, bias, groups, eps } => {
                let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                let mut dg = Tensor::zeros(self.vals[gain.0].dims().to_vec());
                let mut db = Tensor::zeros(self.vals[bias.0].dims().to_vec());
                ops::group_norm_backward(
                    &self.vals[x.0],
                    *groups,
                    &self.vals[gain.0],
                    *eps,
                    gy,
                    &mut dx,
                    Some(&mut dg),
                    Some(&mut db),
                );
                if self.want(*x) {
                    add_into(self.acc(g, *x), &dx);
                }
                if self.want(*gain) {
                    add_into(self.acc(g, *gain), &dg);
                }
                if self.want(*bias) {
                    add_into(self.acc(g, *bias), &db);
                }
            }
            Node::Conv3d { x, w, b, stride, pad, groups } => {
                if self.want(*x) {
                    let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                    conv::conv3d_backward_x(&self.vals[w.0], gy, *stride, *pad, *groups, &mut dx);
                    add_into(self.acc(g, *x), &dx);
                }
                let want_w = self.want(*w);
                let want_b = b.map(|id| self.want(id)).unwrap_or(false);
                if want_w || want_b {
                    let mut dw = Tensor::zeros(self.vals[w.0].dims().to_vec());
                    let mut db = b.map(|id| Tensor::zeros(self.vals[id.0].dims().to_vec()));
                    conv::conv3d_backward_w(&self.vals[x.0], gy, *stride, *pad, *groups, &mut dw, db.as_mut());
                    if want_w {
                        add_into(self.acc(g, *w), &dw);
                    }
                    if let (Some(bid), Some(db)) = (b, db) {
                        if self.want(*bid) {
                            add_into(self.acc(g, *bid), &db);
                        }
                    }
                }
            }
            Node::MaxPool { x, arg } => {
                if self.want(*x) {
                    let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                    conv::max_pool_backward(arg, gy, &mut dx);
                    add_into(self.acc(g, *x), &dx);
                }
            }
            Node::Upsample(x) => {
                if self.want(*x) {
                    let mut dx = Tensor::zeros(self.vals[x.0].dims().to_vec());
                    conv::upsample_backward(gy, &mut dx);
                    add_into(self.acc(g, *x), &dx);
                }
            }
            Node::SsmScan { x, abar, bbar, cout, h } => {
                let mut dx =
                    self.want(*x).then(|| Tensor::zeros(self.vals[x.0].dims().to_vec()));
                let mut dabar = Tensor::zeros(self.vals[abar.0].dims().to_vec());
                let mut dbbar = Tensor::zeros(self.vals[bbar.0].dims().to_vec());
                let mut dcout = Tensor::zeros(self.vals[cout.0].dims().to_vec());
                ops::ssm_scan_backward(
                    &self.vals[x.0],
                    &self.vals[abar.0],
                    &self.vals[bbar.0],
                    &self.vals[cout.0],
                    h,
                    gy,
                    dx.as_mut(),
                    &mut dabar,
                    &mut dbbar,
                    &mut dcout,
                );
                if let Some(dx) = dx {
                    add_into(self.acc(g, *x), &dx);
                }
                if self.want(*abar) {
                    add_into(self.acc(g, *abar), &dabar);
                }
                if self.want(*bbar) {
                    add_into(self.acc(g, *bbar), &dbbar);
                }
                if self.want(*cout) {
                    add_into(self.acc(g, *cout), &dcout);
                }
            }
            Node::Narrow { x, dim, start, len } => {
                if self.want(*x) {
                    let xd = self.vals[x.0].dims().to_vec();
                    let outer: usize = xd[..*dim].iter().product();
                    let inner: usize = xd[*dim + 1..].iter().product();
                    let stride = xd[*dim] * inner;
                    let gx = self.acc(g, *x);
                    for o in 0..outer {
                        let base = o * stride + start * inner;
                        for i in 0..len * inner {
                            gx.data_mut()[base + i] += gy.data()[o * len * inner + i];
                        }
                    }
                }
            }
            Node::Concat { parts, dim } => {
                let od = self.vals[out.0].dims().to_vec();
                let outer: usize = od[..*dim].iter().product();
                let inner: usize = od[*dim + 1..].iter().product();
                let total = od[*dim];
                let mut off = 0usize;
                for p in parts {
                    let pd = self.vals[p.0].dims()[*dim];
                    if self.want(*p) {
                        let gp = self.acc(g, *p);
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            for i in 0..pd * inner {
                                gp.data_mut()[o * pd * inner + i] += gy.data()[src + i];
                            }
                        }
                    }
                    off += pd;
                }
            }
            Node::Gap(x) => {
                if self.want(*x) {
                    let [b, c, d, h, w] = self.vals[x.0].d5();
                    let sp = d * h * w;
                    let gx = self.acc(g, *x);
                    for i in 0..b * c {
                        let gv = T::of(gy.data()[i].dbl() / sp as f64);
                        for s in 0..sp {
                            gx.data_mut()[i * sp + s] += gv;
                        }
                    }
                }
            }
            Node::ChanMean(x) => {
                if self.want(*x) {
                    let [b, c, d, h, w] = self.vals[x.0].d5();
                    let sp = d * h * w;
                    let gx = self.acc(g, *x);
                    for bi in 0..b {
                        for s in 0..sp {
                            let gv = T::of(gy.data()[bi * sp + s].dbl() / c as f64);
                            for ci in 0..c {
                                gx.data_mut()[(bi * c + ci) * sp + s] += gv;
                            }
                        }
                    }
                }
            }
            Node::ChanMax { x, arg } => {
                if self.want(*x) {
                    let [b, c, d, h, w] = self.vals[x.0].d5();
                    let sp = d * h * w;
                    let _ = c;
                    let gx = self.acc(g, *x);
                    for bi in 0..b {
                        for s in 0..sp {
                            let ci = arg[bi * sp + s] as usize;
                            gx.data_mut()[(bi * c + ci) * sp + s] += gy.data()[bi * sp + s];
                        }
                    }
                }
            }
            Node::SpatialMul { x, m } => {
                let [b, c, d, h, w] = self.vals[x.0].d5();
                let sp = d * h * w;
                if self.want(*x) {
                    let mv = self.vals[m.0].clone();
                    let gx = self.acc(g, *x);
                    for bi in 0..b {
                        for ci in 0..c {
                            for s in 0..sp {
                                gx.data_mut()[(bi * c + ci) * sp + s] +=
                                    gy.data()[(bi * c + ci) * sp + s] * mv.data()[bi * sp + s];
                            }
                        }
                    }
                }
                if self.want(*m) {
                    let xv = self.vals[x.0].clone();
                    let gm = self.acc(g, *m);
                    for bi in 0..b {
                        for s in 0..sp {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                acc += xv.data()[(bi * c + ci) * sp + s].dbl()
                                    * gy.data()[(bi * c + ci) * sp + s].dbl();
                            }
                            gm.data_mut()[bi * sp + s] += T::of(acc);
                        }
                    }
                }
            }
            Node::ChannelMul { x, v } => {
                let [b, c, d, h, w] = self.vals[x.0].d5();
                let sp = d * h * w;
                if self.want(*x) {
                    let vv = self.vals[v.0].clone();
                    let gx = self.acc(g, *x);
                    for i in 0..b * c {
                        let gv = vv.data()[i];
                        for s in 0..sp {
                            gx.data_mut()[i * sp + s] += gy.data()[i * sp + s] * gv;
                        }
                    }
                }
                if self.want(*v) {
                    let xv = self.vals[x.0].clone();
                    let gv = self.acc(g, *v);
                    for i in 0..b * c {
                        let mut acc = 0.0;
                        for s in 0..sp {
                            acc += xv.data()[i * sp + s].dbl() * gy.data()[i * sp + s].dbl();
                        }
                        gv.data_mut()[i] += T::of(acc);
                    }
                }
            }
            Node::Dropout { x, keep, p } => {
                if self.want(*x) {
                    let scale = 1.0 / (1.0 - p);
                    let gx = self.acc(g, *x);
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            gx.data_mut()[i] += T::of(gy.data()[i].dbl() * scale);
                        }
                    }
                }
            }
            Node::VolToSeq(x) => {
                if self.want(*x) {
                    let [_, _, d, h, w] = self.vals[x.0].d5();
                    let back = tensor::seq_to_vol(gy, [d, h, w]).expect("gradient reshape");
                    add_into(self.acc(g, *x), &back);
                }
            }
            Node::SeqToVol { x } => {
                if self.want(*x) {
                    let back = tensor::vol_to_seq(gy);
                    add_into(self.acc(g, *x), &back);
                }
            }
            Node::SumAll(x) => {
                if self.want(*x) {
                    let gv = gy.item();
                    let gx = self.acc(g, *x);
                    for o in gx.data_mut() {
                        *o += gv;
                    }
                }
            }
            Node::DiceCe { logits, labels, w_dice, w_ce, eps } => {
                if self.want(*logits) {
                    let up = gy.item().dbl();
                    let gx = self.acc(g, *logits);
                    loss::dice_ce_grad(&self.vals[logits.0], labels, *w_dice, *w_ce, *eps, up, gx);
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.dims(), src.dims());
    for (o, &v) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += v;
    }
}

/// Central finite differences of `f` at `params`, step `h`, parallel over
/// elements. Used by the gradient audits.
pub fn numeric_grad(
    f: &(dyn Fn(&[Tensor<f64>]) -> f64 + Sync),
    params: &[Tensor<f64>],
    h: f64,
) -> Vec<Tensor<f64>> {
    use rayon::prelude::*;
    params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let vals: Vec<f64> = (0..p.len())
                .into_par_iter()
                .map(|i| {
                    let mut ps: Vec<Tensor<f64>> = params.to_vec();
                    ps[pi].data_mut()[i] = p.data()[i] + h;
                    let up = f(&ps);
                    ps[pi].data_mut()[i] = p.data()[i] - h;
                    let down = f(&ps);
                    (up - down) / (2.0 * h)
                })
                .collect();
            Tensor::new(p.dims().to_vec(), vals).unwrap()
        })
        .collect()
}

/// Worst relative error between analytic and numeric gradients; near-zero
/// pairs compare absolutely.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let m = a.abs().max(n.abs());
            if m < 1e-7 {
                0.0
            } else {
                (a - n).abs() / m
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    /// FD-checks one op: builds loss = sum(weights * op(params)) both ways.
    fn check(
        seed: u64,
        dims: &[&[usize]],
        build: impl Fn(&mut Tape<f64>, &[ValId]) -> ValId + Sync,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor<f64>> = dims.iter().map(|d| rand_t(d, &mut rng)).collect();
        // probe output dims
        let out_dims = {
            let mut tape = Tape::new();
            let ids: Vec<ValId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let out = build(&mut tape, &ids);
            tape.dims(out).to_vec()
        };
        let weights = rand_t(&out_dims, &mut rng);
        let eval = |ps: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<ValId> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let out = build(&mut tape, &ids);
            let w = tape.leaf(weights.clone(), false);
            let prod = tape.mul(out, w).unwrap();
            let s = tape.sum_all(prod);
            tape.val(s).item()
        };
        let numeric = numeric_grad(&eval, &params, 1e-5);
        // analytic
        let mut tape = Tape::new();
        let ids: Vec<ValId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        let w = tape.leaf(weights.clone(), false);
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum_all(prod);
        let mut grads = tape.backward(s).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let a = grads.take(*id).unwrap_or_else(|| Tensor::zeros(params[i].dims().to_vec()));
            let err = max_rel_err(&a, &numeric[i]);
            assert!(err < tol, "param {i}: rel err {err}");
        }
    }

    #[test]
    fn add_scale_mul_ops() {
        check(1, &[&[3, 4], &[3, 4]], |t, p| t.add(p[0], p[1]).unwrap(), 1e-6);
        check(2, &[&[2, 5]], |t, p| t.scale(p[0], -1.7), 1e-6);
        check(3, &[&[2, 3], &[2, 3]], |t, p| t.mul(p[0], p[1]).unwrap(), 1e-6);
        check(4, &[&[4, 3], &[1]], |t, p| t.mul_scalar(p[0], p[1]).unwrap(), 1e-6);
        check(5, &[&[3, 4], &[3]], |t, p| t.row_scale(p[0], p[1]).unwrap(), 1e-6);
    }

    #[test]
    fn pointwise_nonlinearities() {
        check(6, &[&[3, 7]], |t, p| t.sigmoid(p[0]), 1e-6);
        check(7, &[&[3, 7]], |t, p| t.silu(p[0]), 1e-6);
        check(8, &[&[3, 7]], |t, p| t.softplus(p[0]), 1e-6);
        check(9, &[&[3, 7]], |t, p| t.exp(p[0]), 1e-6);
        check(10, &[&[3, 7]], |t, p| t.e1m(p[0]), 1e-6);
    }

    #[test]
    fn matmul_and_norms() {
        check(11, &[&[4, 3], &[3, 5], &[5]], |t, p| t.matmul(p[0], p[1], Some(p[2])).unwrap(), 1e-6);
        check(12, &[&[2, 3, 6], &[6], &[6]], |t, p| t.layer_norm(p[0], p[1], p[2], 1e-5).unwrap(), 1e-5);
        check(
            13,
            &[&[2, 4, 2, 2, 2], &[4], &[4]],
            |t, p| t.group_norm(p[0], 2, p[1], p[2], 1e-5).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn conv_pool_upsample() {
        check(
            14,
            &[&[1, 2, 3, 4, 4], &[3, 2, 3, 3, 3], &[3]],
            |t, p| t.conv3d(p[0], p[1], Some(p[2]), 1, 1, 1).unwrap(),
            1e-5,
        );
        // depthwise
        check(
            15,
            &[&[1, 4, 3, 3, 3], &[4, 1, 3, 3, 3]],
            |t, p| t.conv3d(p[0], p[1], None, 1, 1, 4).unwrap(),
            1e-5,
        );
        check(16, &[&[1, 2, 4, 4, 4]], |t, p| t.max_pool(p[0]).unwrap(), 1e-5);
        check(17, &[&[1, 2, 2, 3, 2]], |t, p| t.upsample(p[0]), 1e-5);
    }

    #[test]
    fn scan_adjoint_matches_fd() {
        // d=3, C=2, B=2, L=5
        check(
            18,
            &[&[2, 5, 2], &[3], &[3, 2], &[2, 3]],
            |t, p| t.ssm_scan(p[0], p[1], p[2], p[3]).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn scan_adjoint_on_scalar_hand_case() {
        // same instance as the mixer hand recursion: abar=0.5, bbar=1, c=1
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let abar = Tensor::new(vec![1], vec![0.5]).unwrap();
        let bbar = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let cout = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let params = [x, abar, bbar, cout];
        let eval = |ps: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let ids: Vec<ValId> = ps.iter().map(|p| t.leaf(p.clone(), true)).collect();
            let y = t.ssm_scan(ids[0], ids[1], ids[2], ids[3]).unwrap();
            let s = t.sum_all(y);
            t.val(s).item()
        };
        let numeric = numeric_grad(&eval, &params, 1e-6);
        let mut t = Tape::new();
        let ids: Vec<ValId> = params.iter().map(|p| t.leaf(p.clone(), true)).collect();
        let y = t.ssm_scan(ids[0], ids[1], ids[2], ids[3]).unwrap();
        assert_eq!(t.val(y).data(), &[1.0, 1.5, 1.75]);
        let s = t.sum_all(y);
        let mut grads = t.backward(s).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let a = grads.take(*id).unwrap();
            assert!(max_rel_err(&a, &numeric[i]) < 1e-7, "param {i}");
        }
    }

    #[test]
    fn reshape_slice_reduce_ops() {
        check(19, &[&[1, 3, 2, 2, 2]], |t, p| t.vol_to_seq(p[0]), 1e-6);
        check(20, &[&[1, 8, 3]], |t, p| t.seq_to_vol(p[0], [2, 2, 2]).unwrap(), 1e-6);
        check(21, &[&[2, 6, 4]], |t, p| t.narrow(p[0], 2, 1, 2).unwrap(), 1e-6);
        check(
            22,
            &[&[2, 3, 2], &[2, 1, 2], &[2, 2, 2]],
            |t, p| t.concat(&[p[0], p[1], p[2]], 1).unwrap(),
            1e-6,
        );
        check(23, &[&[2, 3, 2, 2, 2]], |t, p| t.gap(p[0]), 1e-6);
        check(24, &[&[2, 3, 2, 2, 2]], |t, p| t.chan_mean(p[0]), 1e-6);
        check(25, &[&[2, 3, 2, 2, 2]], |t, p| t.chan_max(p[0]), 1e-5);
    }

    #[test]
    fn broadcast_mul_ops() {
        check(
            26,
            &[&[2, 3, 2, 2, 2], &[2, 1, 2, 2, 2]],
            |t, p| t.spatial_mul(p[0], p[1]).unwrap(),
            1e-6,
        );
        check(27, &[&[2, 3, 2, 2, 2], &[2, 3]], |t, p| t.channel_mul(p[0], p[1]).unwrap(), 1e-6);
    }

    #[test]
    fn dropout_grad_uses_recorded_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = rand_t(&[4, 5], &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let y = tape.dropout(xid, 0.4, &mut drop_rng).unwrap();
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        let gx = grads.take(xid).unwrap();
        // gradient must be 1/(1-p) exactly where kept, 0 where dropped
        let yv = tape.val(y);
        for i in 0..x.len() {
            if yv.data()[i] == 0.0 && x.data()[i] != 0.0 {
                assert_eq!(gx.data()[i], 0.0);
            } else {
                assert!((gx.data()[i] - 1.0 / 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_ce_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = rand_t(&[1, 3, 2, 2, 2], &mut rng);
        let labels: Vec<u32> = (0..8).map(|_| rng.random_range(0..3u32)).collect();
        let eval = |ps: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let id = t.leaf(ps[0].clone(), true);
            let l = t.dice_ce(id, &labels, 0.7, 0.3, 1e-5).unwrap();
            t.val(l).item()
        };
        let numeric = numeric_grad(&eval, std::slice::from_ref(&logits), 1e-6);
        let mut t = Tape::new();
        let id = t.leaf(logits.clone(), true);
        let l = t.dice_ce(id, &labels, 0.7, 0.3, 1e-5).unwrap();
        let mut grads = t.backward(l).unwrap();
        let a = grads.take(id).unwrap();
        assert!(max_rel_err(&a, &numeric[0]) < 1e-6);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = rand_t(&[3, 3], &mut rng);
        let b = rand_t(&[3, 3], &mut rng);
        let mut tape = Tape::new();
        let aid = tape.leaf(a, true);
        let bid = tape.leaf(b, false);
        let y = tape.mul(aid, bid).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(aid).is_some());
        assert!(grads.get(bid).is_none(), "frozen buffer must have no gradient");
    }

    #[test]
    fn values_reused_twice_accumulate() {
        // y = x*x via two consumers of the same leaf; dy/dx = 2x
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), true);
        let y = tape.mul(id, id).unwrap();
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        let gx = grads.take(id).unwrap();
        for (g, &v) in gx.data().iter().zip(x.data()) {
            assert!((g - 2.0f64 * v).abs() < 1e-12);
        }
    }
}
