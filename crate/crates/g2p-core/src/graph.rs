//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes; [`Graph::backward`] walks the tape in exact reverse order and
//! accumulates gradients into the parameter slots that produced leaf nodes.
//! Graphs are single-threaded and short-lived: build, run backward, drop.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle into a [`Parameters`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Ids are dense and stable for the life of the
/// store, which makes gradient and optimizer state layout trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

impl<T: Scalar> Default for Parameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    fn new(len: usize) -> Self {
        Self {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(grad.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `a + broadcast(b)`, where the shape of `b` is a suffix of the shape
    /// of `a` (equal shapes included).
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise product of equal shapes.
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Relu {
        x: NodeId,
    },
    /// Softmax along the last axis; the node value caches the output.
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    Dropout {
        x: NodeId,
        mask: Tensor<T>,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Sum {
        x: NodeId,
    },
    /// Mean negative log-likelihood of `targets` under softmax(logits),
    /// skipping PAD positions. Caches the softmax probabilities.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        pad_id: u32,
        probs: Tensor<T>,
        n_active: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    /// Training-mode graph; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf: participates in the forward pass, receives no
    /// gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Parameter leaf: the tensor is copied in and its gradient is
    /// accumulated into the matching [`ParamId`] slot on backward.
    pub fn param(&mut self, store: &Parameters<T>, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = matmul_forward(va, vb)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(Error::Shape(format!(
                "add: shape {:?} is not a broadcastable suffix of {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let bn = vb.numel();
        let b_data = vb.data().to_vec();
        let mut out = va.clone();
        for (i, slot) in out.data_mut().iter_mut().enumerate() {
            *slot += b_data[i % bn];
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let value = softmax_forward(vx)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x }, needs))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let eps = T::from_f64(1e-5);
        let vx = &self.nodes[x.0].value;
        let h = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        let vg = self.nodes[gain.0].value.clone();
        let vb = self.nodes[bias.0].value.clone();
        if vg.shape() != [h] || vb.shape() != [h] {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias must have shape [{h}], got {:?}/{:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.numel() / h;
        let hf = T::from_f64(h as f64);
        let mut normalized = vx.clone();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vx.clone();
        for r in 0..rows {
            let row: Vec<T> = vx.data()[r * h..(r + 1) * h].to_vec();
            let mut mean = T::zero();
            for &v in &row {
                mean += v;
            }
            mean = mean / hf;
            let mut var = T::zero();
            for &v in &row {
                let d = v - mean;
                var += d * d;
            }
            var = var / hf;
            let istd = (var + eps).sqrt().recip();
            inv_std.push(istd);
            for j in 0..h {
                let n = (row[j] - mean) * istd;
                normalized.data_mut()[r * h + j] = n;
                out.data_mut()[r * h + j] = n * vg.data()[j] + vb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Row lookup: output shape is `ids_shape ++ [width]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], ids_shape: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {:?}",
                vt.shape()
            )));
        }
        let (rows, width) = (vt.shape()[0], vt.shape()[1]);
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape("embedding: ids_shape mismatch".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::Shape(format!(
                    "embedding id {id} out of range (table has {rows} rows)"
                )));
            }
            data.extend_from_slice(&vt.data()[id * width..(id + 1) * width]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(width);
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout: train mode scales kept activations by `1/(1-p)` so
    /// eval mode is exactly the identity (the input node is returned
    /// unchanged).
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let scale = T::from_f64(1.0 / keep);
        let numel = self.nodes[x.0].value.numel();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let mask_data: Vec<T> = (0..numel)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = Tensor::new(shape.clone(), mask_data).expect("mask matches input shape");
        let data: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(shape, data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.permuted(axes)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Empty("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    s, first
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = &self.nodes[x.0].value;
                let ax = v.shape()[axis];
                let chunk = ax * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::Sum { x }, needs)
    }

    /// Mean negative log-probability of `targets` under the softmax of
    /// `logits`, skipping positions whose target is `pad_id`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        pad_id: u32,
    ) -> Result<NodeId> {
        let vl = &self.nodes[logits.0].value;
        let v = *vl
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("cross_entropy on rank-0 logits".into()))?;
        let rows = vl.numel() / v;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                rows
            )));
        }
        if !vl.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let probs = softmax_forward(vl)?;
        let mut total = 0.0f64;
        let mut n_active = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t as usize >= v {
                return Err(Error::Shape(format!(
                    "cross_entropy: target id {t} out of range (V={v})"
                )));
            }
            let row = &vl.data()[r * v..(r + 1) * v];
            let mut max = row[0];
            for &x in row {
                max = max.max(x);
            }
            let mut lse = T::zero();
            for &x in row {
                lse += (x - max).exp();
            }
            let log_prob = (row[t as usize] - max).into_f64() - lse.into_f64().ln();
            total -= log_prob;
            n_active += 1;
        }
        if n_active == 0 {
            return Err(Error::Empty("cross_entropy: all positions are PAD".into()));
        }
        let value = Tensor::scalar(T::from_f64(total / n_active as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                n_active,
            },
            needs,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss` node and collects
    /// parameter gradients for a store of `params_len` tensors.
    pub fn backward(&mut self, loss: NodeId, params_len: usize) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward requires a scalar loss node".into()));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::new(params_len);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        if pid.0 >= params_len {
                            return Err(Error::Shape(format!(
                                "parameter id {} outside store of length {params_len}",
                                pid.0
                            )));
                        }
                        out.accumulate(*pid, &grad);
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) =
                        matmul_backward(&self.nodes[a.0].value, &self.nodes[b.0].value, &grad)?;
                    if self.needs(a) {
                        accumulate(&mut node_grads, a, ga);
                    }
                    if self.needs(b) {
                        accumulate(&mut node_grads, b, gb);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut node_grads, a, grad.clone());
                    }
                    if self.needs(b) {
                        let bshape = self.nodes[b.0].value.shape().to_vec();
                        let bn: usize = bshape.iter().product();
                        let mut gb = Tensor::zeros(bshape);
                        for (i, &g) in grad.data().iter().enumerate() {
                            gb.data_mut()[i % bn] += g;
                        }
                        accumulate(&mut node_grads, b, gb);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let ga = elementwise(&grad, &self.nodes[b.0].value);
                        accumulate(&mut node_grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = elementwise(&grad, &self.nodes[a.0].value);
                        accumulate(&mut node_grads, b, gb);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    accumulate(&mut node_grads, x, grad.map(|g| g * c));
                }
                Op::Relu { x } => {
                    let x = *x;
                    let input = &self.nodes[x.0].value;
                    let data: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    let gx = Tensor::new(input.shape().to_vec(), data)?;
                    accumulate(&mut node_grads, x, gx);
                }
                Op::Softmax { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    let h = *y.shape().last().expect("softmax output has rank >= 1");
                    let rows = y.numel() / h;
                    let mut gx = Tensor::zeros(y.shape().to_vec());
                    for r in 0..rows {
                        let yr = &y.data()[r * h..(r + 1) * h];
                        let gr = &grad.data()[r * h..(r + 1) * h];
                        let mut dot = T::zero();
                        for j in 0..h {
                            dot += yr[j] * gr[j];
                        }
                        let out_row = &mut gx.data_mut()[r * h..(r + 1) * h];
                        for j in 0..h {
                            out_row[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut node_grads, x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let h = *normalized.shape().last().expect("rank >= 1");
                    let rows = normalized.numel() / h;
                    let hf = T::from_f64(h as f64);
                    let vg = &self.nodes[gain.0].value;
                    let mut ggain = Tensor::zeros(vec![h]);
                    let mut gbias = Tensor::zeros(vec![h]);
                    let mut gx = Tensor::zeros(normalized.shape().to_vec());
                    for r in 0..rows {
                        let nr = &normalized.data()[r * h..(r + 1) * h];
                        let gr = &grad.data()[r * h..(r + 1) * h];
                        let istd = inv_std[r];
                        let mut sum_dn = T::zero();
                        let mut sum_dn_n = T::zero();
                        for j in 0..h {
                            ggain.data_mut()[j] += gr[j] * nr[j];
                            gbias.data_mut()[j] += gr[j];
                            let dn = gr[j] * vg.data()[j];
                            sum_dn += dn;
                            sum_dn_n += dn * nr[j];
                        }
                        let mean_dn = sum_dn / hf;
                        let mean_dn_n = sum_dn_n / hf;
                        let row = &mut gx.data_mut()[r * h..(r + 1) * h];
                        for j in 0..h {
                            let dn = gr[j] * vg.data()[j];
                            row[j] = istd * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    if self.needs(x) {
                        accumulate(&mut node_grads, x, gx);
                    }
                    if self.needs(gain) {
                        accumulate(&mut node_grads, gain, ggain);
                    }
                    if self.needs(bias) {
                        accumulate(&mut node_grads, bias, gbias);
                    }
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let vt = &self.nodes[table.0].value;
                    let width = vt.shape()[1];
                    let mut gt = Tensor::zeros(vt.shape().to_vec());
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &grad.data()[pos * width..(pos + 1) * width];
                        let dst =
                            &mut gt.data_mut()[id as usize * width..(id as usize + 1) * width];
                        for j in 0..width {
                            dst[j] += src[j];
                        }
                    }
                    accumulate(&mut node_grads, table, gt);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let gx = elementwise(&grad, mask);
                    accumulate(&mut node_grads, x, gx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let gx = grad.reshaped(self.nodes[x.0].value.shape().to_vec())?;
                    accumulate(&mut node_grads, x, gx);
                }
                Op::Permute { x, axes } => {
                    let x = *x;
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gx = grad.permuted(&inverse)?;
                    accumulate(&mut node_grads, x, gx);
                }
                Op::Concat { xs, axis } => {
                    let (xs, axis) = (xs.clone(), *axis);
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total_axis = out_shape[axis];
                    let mut start = 0usize;
                    for &x in &xs {
                        let ax = self.nodes[x.0].value.shape()[axis];
                        if self.needs(x) {
                            let mut gx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                            for o in 0..outer {
                                let src_base = (o * total_axis + start) * inner;
                                let dst_base = o * ax * inner;
                                let n = ax * inner;
                                gx.data_mut()[dst_base..dst_base + n]
                                    .copy_from_slice(&grad.data()[src_base..src_base + n]);
                            }
                            accumulate(&mut node_grads, x, gx);
                        }
                        start += ax;
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    let g = grad.item()?;
                    let gx = Tensor::filled(self.nodes[x.0].value.shape().to_vec(), g);
                    accumulate(&mut node_grads, x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad_id,
                    probs,
                    n_active,
                } => {
                    let logits = *logits;
                    let upstream = grad.item()?;
                    let v = *probs.shape().last().expect("rank >= 1");
                    let scale = upstream / T::from_f64(*n_active as f64);
                    let mut gl = Tensor::zeros(probs.shape().to_vec());
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        let pr = &probs.data()[r * v..(r + 1) * v];
                        let row = &mut gl.data_mut()[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] = pr[j] * scale;
                        }
                        row[t as usize] -= scale;
                    }
                    accumulate(&mut node_grads, logits, gl);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

/// Softmax along the last axis with max-subtraction stabilization.
pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let h = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("softmax on rank-0 tensor".into()))?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input contains NaN".into()));
    }
    let rows = x.numel() / h;
    let mut out = x.clone();
    for r in 0..rows {
        let row: Vec<T> = x.data()[r * h..(r + 1) * h].to_vec();
        let mut max = row[0];
        for &v in &row {
            max = max.max(v);
        }
        let mut sum = T::zero();
        let out_row = &mut out.data_mut()[r * h..(r + 1) * h];
        for j in 0..h {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for v in out_row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ra = a.rank();
    let rb = b.rank();
    if ra < 2 || rb < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if rb == 2 {
        // Flatten the leading axes of `a` into one row block.
        let rows: usize = a.shape()[..ra - 1].iter().product();
        let mut out = vec![T::zero(); rows * n];
        matmul_acc(a.data(), b.data(), &mut out, rows, k, n);
        let mut shape = a.shape()[..ra - 1].to_vec();
        shape.push(n);
        Tensor::new(shape, out)
    } else if ra == rb && a.shape()[..ra - 2] == b.shape()[..rb - 2] {
        let batch: usize = a.shape()[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            matmul_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a.shape()[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Tensor::new(shape, out)
    } else {
        Err(Error::Shape(format!(
            "matmul: incompatible batch shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ra = a.rank();
    let rb = b.rank();
    let k = a.shape()[ra - 1];
    let n = b.shape()[rb - 1];
    let mut ga = Tensor::zeros(a.shape().to_vec());
    let mut gb = Tensor::zeros(b.shape().to_vec());
    if rb == 2 {
        let rows: usize = a.shape()[..ra - 1].iter().product();
        // dA = dC @ B^T, dB = A^T @ dC
        matmul_nt_acc(grad.data(), b.data(), ga.data_mut(), rows, n, k);
        matmul_tn_acc(a.data(), grad.data(), gb.data_mut(), rows, k, n);
    } else {
        let m = a.shape()[ra - 2];
        let batch: usize = a.shape()[..ra - 2].iter().product();
        for i in 0..batch {
            let asl = &a.data()[i * m * k..(i + 1) * m * k];
            let bsl = &b.data()[i * k * n..(i + 1) * k * n];
            let gsl = &grad.data()[i * m * n..(i + 1) * m * n];
            matmul_nt_acc(
                gsl,
                bsl,
                &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                m,
                n,
                k,
            );
            matmul_tn_acc(
                asl,
                gsl,
                &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
    }
    Ok((ga, gb))
}

// ---- finite-difference verification -------------------------------------

/// Central finite differences against the analytic gradient.
///
/// `build` must construct the same forward pass every call (dropout masks
/// are pinned by giving every rebuild the same graph seed). Samples up to
/// `max_coords` coordinates across all parameter tensors and returns the
/// maximum relative error. Intended for `T = f64`.
pub fn gradient_check<T: Scalar>(
    params: &Parameters<T>,
    eps: f64,
    max_coords: usize,
    seed: u64,
    build: impl Fn(&Parameters<T>, &mut Graph<T>) -> Result<NodeId>,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "gradient_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let graph_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let eval = |p: &Parameters<T>| -> Result<f64> {
        let mut g = Graph::train(graph_seed);
        let loss = build(p, &mut g)?;
        Ok(g.value(loss).item()?.into_f64())
    };

    let mut g = Graph::train(graph_seed);
    let loss = build(params, &mut g)?;
    let analytic = g.backward(loss, params.len())?;

    // Deterministic coordinate sample spread across tensors.
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    let total = params.total_len();
    if total <= max_coords {
        for (id, _, t) in params.iter() {
            for i in 0..t.numel() {
                coords.push((id, i));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut remaining = max_coords;
        let n_tensors = params.len();
        for (slot, (id, _, t)) in params.iter().enumerate() {
            let share = remaining / (n_tensors - slot).max(1);
            let take = share.max(1).min(t.numel()).min(remaining);
            for _ in 0..take {
                coords.push((id, (rng.next_u64() as usize) % t.numel()));
            }
            remaining -= take;
            if remaining == 0 {
                break;
            }
        }
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let step = T::from_f64(eps);
    for (id, i) in coords {
        let original = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = original + step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = original - step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic
            .get(id)
            .map(|t| t.data()[i].into_f64())
            .unwrap_or(0.0);
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient_check: non-finite gradient at {}[{i}]",
                params.name(id)
            )));
        }
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-10 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
