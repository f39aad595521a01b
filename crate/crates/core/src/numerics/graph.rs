//! Reverse-mode differentiation over a tape of closures.
//!
//! Every forward op pushes its result onto the tape together with a closure
//! that maps the output gradient onto its parents. [`Graph::backward`] walks
//! the tape in reverse. Nodes whose parents need no gradient record no
//! closure, so a graph built with [`Graph::inference`] is just a value store.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::nn::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axis_split, broadcast_offsets, broadcast_shape, Mask, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// View handed to backward closures: parent values and gradient slots.
pub struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Value of `v` together with its gradient slot.
    pub fn value_and_grad(&mut self, v: Var) -> Option<(&Tensor, &mut [f64])> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some((
            &node.value,
            self.grads[v.0].get_or_insert_with(|| vec![0.0; n]),
        ))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: Vec<Option<Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
        }
    }

    /// A graph that only evaluates values (frozen parameters, no tape).
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Loads a parameter once per graph and returns its leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        if let Some(v) = self.params[id.index()] {
            return v;
        }
        let value = store.get(id).tensor.clone();
        self.nodes.push(Node {
            value,
            requires_grad: self.grad_enabled,
            backward: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params[id.index()] = Some(v);
        v
    }

    fn push<F>(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                };
                bw(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter of `store` loaded into this graph, in
    /// store order. Parameters the graph never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (i, slot) in self.params.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.get(*v) {
                    out.get_mut(ParamId::from_index(i)).copy_from_slice(g);
                }
            }
        }
        out
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sa == sb {
            let data: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
            let value = Tensor::from_parts(sa, data);
            return self.push(op, value, &[a, b], move |g, s| {
                let (x, y) = (s.value(a).data(), s.value(b).data());
                if let Some(ga) = s.grad_mut(a) {
                    for i in 0..g.len() {
                        ga[i] += da(g[i], x[i], y[i]);
                    }
                }
                if let Some(gb) = s.grad_mut(b) {
                    for i in 0..g.len() {
                        gb[i] += db(g[i], x[i], y[i]);
                    }
                }
            });
        }
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
        let oa = broadcast_offsets(&sa, &out);
        let ob = broadcast_offsets(&sb, &out);
        let data: Vec<f64> = oa.iter().zip(&ob).map(|(&i, &j)| f(av[i], bv[j])).collect();
        let value = Tensor::from_parts(out, data);
        self.push(op, value, &[a, b], move |g, s| {
            let x = s.value(a).data();
            let y = s.value(b).data();
            if let Some(ga) = s.grad_mut(a) {
                for k in 0..g.len() {
                    ga[oa[k]] += da(g[k], x[oa[k]], y[ob[k]]);
                }
            }
            if let Some(gb) = s.grad_mut(b) {
                for k in 0..g.len() {
                    gb[ob[k]] += db(g[k], x[oa[k]], y[ob[k]]);
                }
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    // ---- elementwise unary -------------------------------------------------

    /// `f` computes the output; `df(x, y)` the local derivative from input
    /// `x` and output `y`.
    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let src = self.value(a);
        let data: Vec<f64> = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let out = Var(self.nodes.len());
        self.push(op, value, &[a], move |g, s| {
            let y = s.value(out).data();
            if let Some((xv, ga)) = s.value_and_grad(a) {
                let x = xv.data();
                for i in 0..g.len() {
                    ga[i] += g[i] * df(x[i], y[i]);
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + k, |_, _| 1.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, math::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, math::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, math::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, math::softplus, |x, _| math::sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + math::tanh(C * (x + K * x * x * x))),
            |x, _| {
                let t = math::tanh(C * (x + K * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
            },
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[a], move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("sum_axis", Tensor::from_parts(out_shape, data), &[a], move |g, s| {
            if let Some(ga) = s.grad_mut(a) {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
        })
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, &[a], move |g, s| {
            if let Some(ga) = s.grad_mut(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let mut in_strides = vec![1usize; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(a).numel();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            gather.push(off);
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let x = self.value(a).data();
        let data: Vec<f64> = gather.iter().map(|&i| x[i]).collect();
        self.push("permute", Tensor::from_parts(out_shape, data), &[a], move |g, s| {
            if let Some(ga) = s.grad_mut(a) {
                for (k, &i) in gather.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
        })
    }

    /// Broadcasts `a` to `shape` (standard trailing-axis alignment).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &sa, shape)),
        }
        let offsets = broadcast_offsets(&sa, shape);
        let x = self.value(a).data();
        let data: Vec<f64> = offsets.iter().map(|&i| x[i]).collect();
        self.push("broadcast_to", Tensor::from_parts(shape.to_vec(), data), &[a], move |g, s| {
            if let Some(ga) = s.grad_mut(a) {
                for (k, &i) in offsets.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let x = self.value(p).data();
                data.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let parts_owned = parts.to_vec();
        self.push("concat", Tensor::from_parts(out_shape, data), parts, move |g, s| {
            let mut start = 0;
            for (&p, &len) in parts_owned.iter().zip(&lens) {
                if let Some(gp) = s.grad_mut(p) {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                start += len;
            }
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(&shape);
            expanded.push(self.reshape(p, &s)?);
        }
        self.concat(&expanded, 0)
    }

    /// Selects entries `indices` along `axis`; repeated indices are allowed.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("index_select", &shape, axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("index_select", &shape, indices));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = k;
        let idx = indices.to_vec();
        self.push("index_select", Tensor::from_parts(out_shape, data), &[a], move |g, s| {
            if let Some(ga) = s.grad_mut(a) {
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * len + i) * inner;
                        for t in 0..inner {
                            ga[dst + t] += g[src + t];
                        }
                    }
                }
            }
        })
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.index_select(a, axis, &indices)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let lead = broadcast_shape(la, lb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let nbatch: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.extend_from_slice(&[p, r]);

        // Right operand shared by every batch: fold the batch into the rows.
        if lb.iter().product::<usize>() == 1 && la.iter().product::<usize>() == nbatch {
            let rows = nbatch * p;
            let mut c = vec![0.0; rows * r];
            gemm(rows, q, r, self.value(a).data(), q, 1, self.value(b).data(), r, 1, &mut c);
            return self.push("matmul", Tensor::from_parts(out_shape, c), &[a, b], move |g, s| {
                if s.grad_mut(a).is_some() {
                    let bv = s.value(b).data();
                    let ga = s.grad_mut(a).unwrap();
                    // dA = dC * B^T
                    gemm(rows, r, q, g, r, 1, &bv, 1, r, ga);
                }
                if s.grad_mut(b).is_some() {
                    let av = s.value(a).data();
                    let gb = s.grad_mut(b).unwrap();
                    // dB = A^T * dC
                    gemm(q, rows, r, &av, 1, q, g, r, 1, gb);
                }
            });
        }

        let oa: Vec<usize> = broadcast_offsets(la, &lead).into_iter().map(|o| o * p * q).collect();
        let ob: Vec<usize> = broadcast_offsets(lb, &lead).into_iter().map(|o| o * q * r).collect();
        let mut c = vec![0.0; nbatch * p * r];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for k in 0..nbatch {
                gemm(p, q, r, &av[oa[k]..], q, 1, &bv[ob[k]..], r, 1, &mut c[k * p * r..(k + 1) * p * r]);
            }
        }
        self.push("matmul", Tensor::from_parts(out_shape, c), &[a, b], move |g, s| {
            if s.grad_mut(a).is_some() {
                let bv = s.value(b).data();
                let ga = s.grad_mut(a).unwrap();
                for k in 0..nbatch {
                    gemm(p, r, q, &g[k * p * r..], r, 1, &bv[ob[k]..], 1, r, &mut ga[oa[k]..oa[k] + p * q]);
                }
            }
            if s.grad_mut(b).is_some() {
                let av = s.value(a).data();
                let gb = s.grad_mut(b).unwrap();
                for k in 0..nbatch {
                    gemm(q, p, r, &av[oa[k]..], 1, q, &g[k * p * r..], r, 1, &mut gb[ob[k]..ob[k] + q * r]);
                }
            }
        })
    }

    // ---- normalization -----------------------------------------------------

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = math::exp(x[at(l)] - m);
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let out = Var(self.nodes.len());
        self.push("softmax", Tensor::from_parts(shape, y), &[a], move |g, s| {
            let y = s.value(out).data();
            if let Some(ga) = s.grad_mut(a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        })
    }

    /// Softmax over the last axis restricted to positions where `mask` (broadcast
    /// to the input shape) is true. Masked positions get exactly zero weight;
    /// a row with no unmasked position is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        match broadcast_shape(mask.shape(), &shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("masked_softmax", &shape, mask.shape())),
        }
        let len = *shape.last().unwrap();
        let rows = self.value(a).numel() / len;
        let keep: Vec<bool> = if mask.shape() == shape.as_slice() {
            mask.data().to_vec()
        } else {
            broadcast_offsets(mask.shape(), &shape)
                .into_iter()
                .map(|o| mask.data()[o])
                .collect()
        };
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for row in 0..rows {
            let r = row * len..(row + 1) * len;
            let (xr, kr) = (&x[r.clone()], &keep[r.clone()]);
            let m = xr
                .iter()
                .zip(kr)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let yr = &mut y[r];
            let mut z = 0.0;
            for l in 0..len {
                if kr[l] {
                    let e = math::exp(xr[l] - m);
                    yr[l] = e;
                    z += e;
                }
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        let out = Var(self.nodes.len());
        self.push("masked_softmax", Tensor::from_parts(shape, y), &[a], move |g, s| {
            let y = s.value(out).data();
            if let Some(ga) = s.grad_mut(a) {
                for row in 0..rows {
                    let r = row * len..(row + 1) * len;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for l in r {
                        ga[l] += y[l] * (g[l] - dot);
                    }
                }
            }
        })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| math::exp(x[at(l)] - m)).sum();
                let lse = m + math::ln(z);
                for l in 0..len {
                    y[at(l)] = x[at(l)] - lse;
                }
            }
        }
        let out = Var(self.nodes.len());
        self.push("log_softmax", Tensor::from_parts(shape, y), &[a], move |g, s| {
            let y = s.value(out).data();
            if let Some(ga) = s.grad_mut(a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += g[at(l)] - math::exp(y[at(l)]) * gs;
                        }
                    }
                }
            }
        })
    }

    /// Layer normalization along `axis` with affine `gain`/`bias` of shape
    /// `[shape[axis]]`. Variance is the biased estimator; `eps` sits inside
    /// the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv = vec![0.0; outer * inner];
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| xv[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (xv[at(l)] - mean) * (xv[at(l)] - mean)).sum::<f64>() / len as f64;
                let s = 1.0 / math::sqrt(var + eps);
                inv[o * inner + i] = s;
                for l in 0..len {
                    let h = (xv[at(l)] - mean) * s;
                    xhat[at(l)] = h;
                    y[at(l)] = h * gv[l] + bv[l];
                }
            }
        }
        self.push("layer_norm", Tensor::from_parts(shape, y), &[x, gain, bias], move |g, s| {
            let gv = s.value(gain).data();
            if let Some(gg) = s.grad_mut(gain) {
                for (k, &gk) in g.iter().enumerate() {
                    gg[(k / inner) % len] += gk * xhat[k];
                }
            }
            if let Some(gb) = s.grad_mut(bias) {
                for (k, &gk) in g.iter().enumerate() {
                    gb[(k / inner) % len] += gk;
                }
            }
            if let Some(gx) = s.grad_mut(x) {
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for l in 0..len {
                            let d = g[at(l)] * gv[l];
                            sum_d += d;
                            sum_dx += d * xhat[at(l)];
                        }
                        let sc = inv[o * inner + i] / n;
                        for l in 0..len {
                            let d = g[at(l)] * gv[l];
                            gx[at(l)] += sc * (n * d - sum_d - xhat[at(l)] * sum_dx);
                        }
                    }
                }
            }
        })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok(())
}

/// `c += a * b` for an `m x k` by `k x n` product; `a`, `b` given by row and
/// column strides, `c` dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
