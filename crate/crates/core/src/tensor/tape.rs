use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const COSINE_MIN_NORM: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ExpandLeading(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear record of differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// [`Tape::backward`] consumes the tape and visits each node once, newest first.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `v`; exactly zero when `v`
    /// did not influence the loss. Intermediate gradients are not retained.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes that no gradient can flow through do not need their op record.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(
                op,
                format!("shapes {} and {} differ", shape_str(sa), shape_str(sb)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`'s.
    /// This is the only broadcasting the engine supports.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} is not a suffix of {}", shape_str(sb), shape_str(sa)),
            ));
        }
        let bias = self.value(b).data();
        let width = bias.len().max(1);
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(width) {
            add_into(chunk, bias);
        }
        let value = Tensor::from_parts(sa.to_vec(), data);
        self.push("add_bias", value, Op::AddBias(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {} by {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product of `a[g×m×k]` and `b[g×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(
                "batch_matmul",
                format!("cannot multiply {} by {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(g * m * n);
        for i in 0..g {
            data.extend(kernels::matmul(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let value = Tensor::from_parts(vec![g, m, n], data);
        self.push("batch_matmul", value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {}", shape_str(shape)),
            ));
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), shape, perm);
        let value = Tensor::from_parts(out_shape, data);
        self.push("permute", value, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected a matrix, got {}", shape_str(self.shape(x))),
            ));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {}", shape_str(&base)),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{} does not match {} off axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {}", start + len, shape_str(&shape)),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    /// Repeats `x` `count` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, count: usize) -> Result<Var> {
        let v = self.value(x);
        let mut shape = vec![count];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(count);
        let value = Tensor::from_parts(shape, data);
        self.push("expand_leading", value, Op::ExpandLeading(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape().last().copied().unwrap_or(1);
        if n == 0 || v.rank() == 0 {
            return Err(Error::dim(
                "softmax_rows",
                format!("last dimension of {} is empty", shape_str(v.shape())),
            ));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("softmax_rows", value, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last axis' length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape().last().copied().unwrap_or(0);
        let gshape = self.shape(gain);
        let bshape = self.shape(bias);
        if n == 0 || gshape != [n] || bshape != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {} with gain {} and bias {}",
                    shape_str(v.shape()),
                    shape_str(gshape),
                    shape_str(bshape)
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = v.numel() / n;
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&e| 0.5 * e * (1.0 + (GELU_C * (e + GELU_K * e * e * e)).tanh()))
            .collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// `ln(1 + eˣ)`, elementwise.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| softplus(e)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("softplus", value, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::dim("mean", "mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || s[1] == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {} with {} labels", shape_str(s), labels.len()),
            ));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        let mut probs = v.data().to_vec();
        let mut total = 0.0;
        for (row, (src, &label)) in probs.chunks_mut(classes).zip(v.data().chunks(classes).zip(labels)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            total += lse - src[label];
            softmax_in_place(row);
        }
        let loss = total / batch as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Row-wise cosine similarity of two `[B×n]` matrices, giving `[B]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(
                "cosine_similarity",
                format!("expected [B×n] rows, got {}", shape_str(s)),
            ));
        }
        let n = s[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut norm_a = Vec::with_capacity(s[0]);
        let mut norm_b = Vec::with_capacity(s[0]);
        let mut cos = Vec::with_capacity(s[0]);
        for (ra, rb) in da.chunks(n).zip(db.chunks(n)) {
            let na = ra.iter().map(|e| e * e).sum::<f64>().sqrt();
            let nb = rb.iter().map(|e| e * e).sum::<f64>().sqrt();
            for norm in [na, nb] {
                if norm.is_nan() || norm < COSINE_MIN_NORM {
                    return Err(Error::DegenerateVector { norm });
                }
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            norm_a.push(na);
            norm_b.push(nb);
            cos.push(dot / (na * nb));
        }
        let value = Tensor::from_parts(vec![s[0]], cos);
        let op = Op::CosineRows { a, b, norm_a, norm_b };
        self.push("cosine_similarity", value, op, &[a, b])
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", u, v)?;
        let n = self.value(u).numel();
        let ur = self.reshape(u, &[1, n])?;
        let vr = self.reshape(v, &[1, n])?;
        let c = self.cosine_rows(ur, vr)?;
        self.reshape(c, &[])
    }

    /// `x · w + b` applied to the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim(
                "linear",
                format!("input {} with weight {}", shape_str(&xs), shape_str(&ws)),
            ));
        }
        let rows = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse pass from a single-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let nodes = self.nodes;
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // leaf gradients are kept for the caller
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => add_into(existing, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|e| -e).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
                Op::AddBias(a, b) => {
                    let width = nodes[b.0].value.numel().max(1);
                    let mut gb = vec![0.0; width];
                    for chunk in g.chunks(width) {
                        add_into(&mut gb, chunk);
                    }
                    acc(*b, gb);
                    acc(*a, g);
                }
                Op::Scale(x, f) => acc(*x, g.iter().map(|e| e * f).collect()),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&shapes[a.0], &shapes[b.0]);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if nodes[a.0].requires_grad {
                        acc(*a, kernels::matmul_nt(&g, val(*b), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, kernels::matmul_tn(val(*a), &g, k, m, n));
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (sa, sb) = (&shapes[a.0], &shapes[b.0]);
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        let mut ga = Vec::with_capacity(bs * m * k);
                        for i in 0..bs {
                            ga.extend(kernels::matmul_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                            ));
                        }
                        acc(*a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = Vec::with_capacity(bs * k * n);
                        for i in 0..bs {
                            gb.extend(kernels::matmul_tn(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                            ));
                        }
                        acc(*b, gb);
                    }
                }
                Op::Permute(x, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, gx) = kernels::permute(&g, &shapes[idx], &inverse);
                    acc(*x, gx);
                }
                Op::Reshape(x) => acc(*x, g),
                Op::Concat(parts, axis) => {
                    let out_shape = &shapes[idx];
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let row = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let chunk = shapes[p.0][*axis] * inner;
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gp.extend_from_slice(&g[base..base + chunk]);
                        }
                        offset += chunk;
                        acc(*p, gp);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = &shapes[x.0];
                    let len = shapes[idx][*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let mut gx = vec![0.0; nodes[x.0].value.numel()];
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::ExpandLeading(x) => {
                    let width = nodes[x.0].value.numel().max(1);
                    let mut gx = vec![0.0; width];
                    for chunk in g.chunks(width) {
                        add_into(&mut gx, chunk);
                    }
                    acc(*x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let n = *shapes[idx].last().unwrap();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = *shapes[idx].last().unwrap();
                    let gv = val(*gain);
                    let mut ggain = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..n {
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                        }
                        mean_gh /= n as f64;
                        mean_ghh /= n as f64;
                        for j in 0..n {
                            gx.push(r * (gr[j] * gv[j] - mean_gh - hr[j] * mean_ghh));
                        }
                    }
                    acc(*gain, ggain);
                    acc(*bias, gbias);
                    acc(*x, gx);
                }
                Op::Softplus(x) => {
                    let gx = val(*x).iter().zip(&g).map(|(&e, &gi)| gi * sigmoid(e)).collect();
                    acc(*x, gx);
                }
                Op::Gelu(x) => {
                    let gx = val(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&e, &gi)| {
                            let t = (GELU_C * (e + GELU_K * e * e * e)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * e * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * e * e);
                            gi * d
                        })
                        .collect();
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].value.numel()]),
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = shapes[logits.0][1];
                    let scale = g[0] / labels.len() as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gx[i * classes + l] -= scale;
                    }
                    acc(*logits, gx);
                }
                Op::CosineRows { a, b, norm_a, norm_b } => {
                    let n = shapes[a.0][1];
                    let cos = node.value.data();
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = Vec::with_capacity(va.len());
                    let mut gb = Vec::with_capacity(vb.len());
                    for i in 0..cos.len() {
                        let (ra, rb) = (&va[i * n..(i + 1) * n], &vb[i * n..(i + 1) * n]);
                        let (na, nb, c, gi) = (norm_a[i], norm_b[i], cos[i], g[i]);
                        for j in 0..n {
                            ga.push(gi * (rb[j] / (na * nb) - c * ra[j] / (na * na)));
                            gb.push(gi * (ra[j] / (na * nb) - c * rb[j] / (nb * nb)));
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in row.iter_mut() {
        *e /= total;
    }
}
