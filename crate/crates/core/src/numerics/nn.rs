use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;

use super::graph::{Graph, Var};
use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// RNG used for initialization, dropout and data generation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

/// Named, ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(tensor.shape()),
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Overwrites values from `(name, tensor)` entries. Every parameter must be
    /// present with a matching shape; extra entries are an error.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape("checkpoint load", p.tensor.shape(), t.shape()));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.0.iter().flatten().map(|x| x * x).sum())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let limit = math::sqrt(6.0 / (d_in + d_out) as f64);
        let weight = store.add(&format!("{name}.weight"), uniform(rng, &[d_in, d_out], limit))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Two dense layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            first: Linear::new(store, &format!("{name}.0"), d_in, hidden, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    /// Normalizes the last axis.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, gain, bias, axis, LAYER_NORM_EPS)
    }
}

/// Inverted dropout. Identity when `rng` is `None` or the rate is zero.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::from_parts(shape, data))?;
    g.mul(x, m)
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    /// `q: [Bq, Sq, h]`, `k`/`v: [Bk, Sk, h]` (batch axes broadcast),
    /// `mask` broadcastable to `[B, Sq, Sk]` with `true` = may attend.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, q, k, v, mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the attention
    /// weights `[B, heads, Sq, Sk]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
    ) -> Result<(Var, Var)> {
        let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[2] != self.width || ks[2] != self.width {
            return Err(Error::shape("multi_head_attention", &qs, &ks));
        }
        let (hd, dh) = (self.heads, self.width / self.heads);
        let (bq, sq, bk, sk) = (qs[0], qs[1], ks[0], ks[1]);

        let qp = self.query.forward(g, store, q)?;
        let qp = g.reshape(qp, &[bq, sq, hd, dh])?;
        let qp = g.permute(qp, &[0, 2, 1, 3])?;
        let kp = self.key.forward(g, store, k)?;
        let kp = g.reshape(kp, &[bk, sk, hd, dh])?;
        let kt = g.permute(kp, &[0, 2, 3, 1])?;
        let vp = self.value.forward(g, store, v)?;
        let vp = g.reshape(vp, &[bk, sk, hd, dh])?;
        let vp = g.permute(vp, &[0, 2, 1, 3])?;

        let scores = g.matmul(qp, kt)?;
        let scores = g.scale(scores, 1.0 / math::sqrt(dh as f64))?;
        let weights = match mask {
            Some(m) => {
                let ms = m.shape();
                let m4 = match ms.len() {
                    2 => m.clone().reshape(&[1, 1, ms[0], ms[1]])?,
                    3 => m.clone().reshape(&[ms[0], 1, ms[1], ms[2]])?,
                    _ => return Err(Error::shape("attention mask", ms, &[sq, sk])),
                };
                g.masked_softmax(scores, &m4)?
            }
            None => g.softmax(scores, 3)?,
        };
        let out = g.matmul(weights, vp)?;
        let b = g.shape(out)[0];
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, sq, self.width])?;
        let mut out = self.output.forward(g, store, out)?;
        if let Some(m) = mask {
            if let Some(rows) = live_rows(m, &[b, sq, sk])? {
                let rows = g.constant(rows)?;
                out = g.mul(out, rows)?;
            }
        }
        Ok((out, weights))
    }
}

/// `[B, Sq, 1]` indicator of query rows with at least one attendable key, or
/// `None` when every row has one.
fn live_rows(mask: &Mask, scores: &[usize; 3]) -> Result<Option<Tensor>> {
    let [b, sq, sk] = *scores;
    let ms = mask.shape();
    let (mb, mq) = match ms.len() {
        2 => (1, ms[0]),
        3 => (ms[0], ms[1]),
        _ => return Err(Error::shape("attention mask", ms, &[sq, sk])),
    };
    let mk = ms[ms.len() - 1];
    let data = mask.data();
    let mut rows = Vec::with_capacity(b * sq);
    let mut any_dead = false;
    for bi in 0..b {
        for qi in 0..sq {
            let (bb, qq) = (if mb == 1 { 0 } else { bi }, if mq == 1 { 0 } else { qi });
            let base = (bb * mq + qq) * mk;
            let live = data[base..base + mk].iter().any(|&x| x);
            any_dead |= !live;
            rows.push(if live { 1.0 } else { 0.0 });
        }
    }
    Ok(any_dead.then(|| Tensor::from_parts(vec![b, sq, 1], rows)))
}

/// Attention block: attention, residual, layer norm, feed-forward, residual,
/// layer norm. Self-attention when query and key/value are the same tensor,
/// cross-attention otherwise.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub feed_forward: Mlp,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            feed_forward: Mlp::new(store, &format!("{name}.ff"), width, ff_width, width, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            dropout,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
        mask: Option<&Mask>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let a = self.attention.forward(g, store, query, context, context, mask)?;
        let a = dropout(g, a, self.dropout, rng.as_deref_mut())?;
        let x = g.add(query, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.feed_forward.forward(g, store, x)?;
        let f = dropout(g, f, self.dropout, rng.as_deref_mut())?;
        let y = g.add(x, f)?;
        self.norm2.forward(g, store, y)
    }
}
