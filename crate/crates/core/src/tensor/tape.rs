//! Define-by-run gradient tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, gelu, gelu_grad, sigmoid, softplus};
use super::{as_matrix, axis_split, Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Batched multi-head attention layout. Queries are `batch·len_q` rows and
/// keys/values `batch·len_k` rows; heads split the column dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub heads: usize,
    pub len_q: usize,
    pub len_k: usize,
}

/// Saved attention probabilities, `batch × heads × len_q × len_k`, with
/// the expanded `batch × len_q × len_k` visibility mask.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProbs<'a, T: Scalar> {
    pub shape: AttentionShape,
    pub mask: &'a [bool],
    pub probs: &'a [T],
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    DivScalar(NodeId, NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        live: usize,
    },
    Bce {
        logits: NodeId,
        labels: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    tracked: bool,
    op: Op<T>,
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    map: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<T>)> {
        self.map.iter()
    }
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<&Node<T>> {
        if id.tape != self.id {
            return Err(TensorError::DetachedLoss);
        }
        self.nodes.get(id.index).ok_or(TensorError::DetachedLoss)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.index]
    }

    fn push(&mut self, value: Tensor<T>, tracked: bool, op: Op<T>) -> NodeId {
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node { value, tracked, op });
        id
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        assert_eq!(id.tape, self.id, "node from another tape");
        &self.node(id).value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).tracked
    }

    /// Row-major `batch × heads × len_q × len_k` attention weights of an
    /// attention node; zero at masked positions.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[T]> {
        match &self.check(id).ok()?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node on the tape, in creation order.
    pub fn attention_layers(&self) -> Vec<AttentionProbs<'_, T>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { shape, mask, probs, .. } => Some(AttentionProbs {
                    shape: *shape,
                    mask,
                    probs,
                }),
                _ => None,
            })
            .collect()
    }

    fn values2(&self, a: NodeId, b: NodeId) -> Result<(&Tensor<T>, &Tensor<T>, bool)> {
        let na = self.check(a)?;
        let nb = self.check(b)?;
        Ok((&na.value, &nb.value, na.tracked || nb.tracked))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb, tracked) = self.values2(a, b)?;
        let out = va.matmul(vb)?;
        ensure_finite(&out, "matmul")?;
        Ok(self.push(out, tracked, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?;
        let out = n.value.transpose()?;
        let tracked = n.tracked;
        Ok(self.push(out, tracked, Op::Transpose(x)))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (va, vb, tracked) = self.values2(a, b)?;
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        ensure_finite(&out, name)?;
        Ok((out, tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, tracked, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, tracked, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, tracked, Op::Mul(a, b)))
    }

    /// Adds a vector to every row (last dimension) of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb, tracked) = self.values2(x, bias)?;
        let c = vx.cols();
        if vb.numel() != c {
            return Err(mismatch("add_row", vx, vb));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        ensure_finite(&out, "add_row")?;
        Ok(self.push(out, tracked, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let n = self.check(x)?;
        let s = T::from_f64(factor);
        let data = n.value.data().iter().map(|&v| v * s).collect();
        let out = Tensor::from_parts(n.value.shape().to_vec(), data);
        let tracked = n.tracked;
        ensure_finite(&out, "scale")?;
        Ok(self.push(out, tracked, Op::Scale(x, s)))
    }

    /// Divides every element of `x` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs, tracked) = self.values2(x, s)?;
        let d = vs.item()?;
        let data = vx.data().iter().map(|&v| v / d).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        ensure_finite(&out, "div_scalar")?;
        Ok(self.push(out, tracked, Op::DivScalar(x, s)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?;
        let data = n.value.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_parts(n.value.shape().to_vec(), data);
        let tracked = n.tracked;
        ensure_finite(&out, "gelu")?;
        Ok(self.push(out, tracked, Op::Gelu(x)))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let n = self.check(x)?;
        let out = n.value.softmax(axis)?;
        let tracked = n.tracked;
        ensure_finite(&out, "softmax")?;
        Ok(self.push(out, tracked, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let n = self.check(x)?;
        let (outer, len, inner) = axis_split(n.value.shape(), axis)?;
        let mut data = n.value.data().to_vec();
        kernels::log_softmax_axis(&mut data, outer, len, inner);
        let out = Tensor::from_parts(n.value.shape().to_vec(), data);
        let tracked = n.tracked;
        ensure_finite(&out, "log_softmax")?;
        Ok(self.push(out, tracked, Op::LogSoftmax { x, axis }))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let nx = self.check(x)?;
        let ng = self.check(gamma)?;
        let nb = self.check(beta)?;
        let c = nx.value.cols();
        if ng.value.numel() != c {
            return Err(mismatch("layer_norm", &nx.value, &ng.value));
        }
        if nb.value.numel() != c {
            return Err(mismatch("layer_norm", &nx.value, &nb.value));
        }
        let rows = nx.value.rows();
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut xhat = Vec::with_capacity(nx.value.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(nx.value.numel());
        for row in nx.value.data().chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &g), &b) in row.iter().zip(ng.value.data()).zip(nb.value.data()) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let tracked = nx.tracked || ng.tracked || nb.tracked;
        let out = Tensor::from_parts(nx.value.shape().to_vec(), out);
        ensure_finite(&out, "layer_norm")?;
        Ok(self.push(
            out,
            tracked,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Selects rows of a matrix (embedding lookup); backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let n = self.check(x)?;
        let (rows, c) = as_matrix(&n.value, "gather_rows")?;
        if index.is_empty() {
            return Err(TensorError::Invalid("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index {
            if r >= rows {
                return Err(TensorError::TargetOutOfRange {
                    target: r,
                    classes: rows,
                });
            }
            data.extend_from_slice(n.value.row(r));
        }
        let out = Tensor::from_parts(vec![index.len(), c], data);
        let tracked = n.tracked;
        Ok(self.push(
            out,
            tracked,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Stacks two matrices vertically.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb, tracked) = self.values2(a, b)?;
        let (ra, ca) = as_matrix(va, "concat_rows")?;
        let (rb, cb) = as_matrix(vb, "concat_rows")?;
        if ca != cb {
            return Err(mismatch("concat_rows", va, vb));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::from_parts(vec![ra + rb, ca], data);
        Ok(self.push(out, tracked, Op::ConcatRows(a, b)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n = self.check(x)?;
        let out = n.value.reshape(shape)?;
        let tracked = n.tracked;
        Ok(self.push(out, tracked, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?;
        let s = n.value.data().iter().copied().sum::<T>();
        let tracked = n.tracked;
        let out = Tensor::scalar(s);
        ensure_finite(&out, "sum")?;
        Ok(self.push(out, tracked, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?;
        let s = n.value.data().iter().copied().sum::<T>() / T::from_f64(n.value.numel() as f64);
        let tracked = n.tracked;
        let out = Tensor::scalar(s);
        ensure_finite(&out, "mean")?;
        Ok(self.push(out, tracked, Op::Mean(x)))
    }

    /// Mean negative log-softmax of the target class over rows whose target
    /// is not `ignore`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, targets: &[usize], ignore: usize) -> Result<NodeId> {
        let n = self.check(logits)?;
        let (rows, classes) = as_matrix(&n.value, "cross_entropy_logits")?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                left: n.value.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = n.value.data().to_vec();
        kernels::softmax_axis(&mut probs, rows, classes, 1);
        let mut total = T::zero();
        let mut live = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            }
            let row = n.value.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            live += 1;
        }
        if live == 0 {
            return Err(TensorError::AllIgnored);
        }
        let out = Tensor::scalar(total / T::from_f64(live as f64));
        ensure_finite(&out, "cross_entropy_logits")?;
        let tracked = n.tracked;
        Ok(self.push(
            out,
            tracked,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                live,
            },
        ))
    }

    /// Mean binary cross-entropy of one logit per element against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[bool]) -> Result<NodeId> {
        let n = self.check(logits)?;
        if labels.len() != n.value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: n.value.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let labels: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
        let total: T = n
            .value
            .data()
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| softplus(x) - x * y)
            .sum();
        let out = Tensor::scalar(total / T::from_f64(labels.len() as f64));
        ensure_finite(&out, "bce_with_logits")?;
        let tracked = n.tracked;
        Ok(self.push(out, tracked, Op::Bce { logits, labels }))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?;
        let c = n.value.cols();
        let floor = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(n.value.rows());
        let mut data = Vec::with_capacity(n.value.numel());
        for row in n.value.data().chunks_exact(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::from_parts(n.value.shape().to_vec(), data);
        let tracked = n.tracked;
        Ok(self.push(out, tracked, Op::L2Normalize { x, norms }))
    }

    /// Scaled dot-product attention per (batch, head):
    /// `softmax(q kᵀ / √d_head)` over allowed keys, times `v`; heads are
    /// concatenated along columns.
    ///
    /// `mask` is `len_q × len_k` (shared by the batch) or
    /// `batch × len_q × len_k`; `true` means the key is visible. Masked keys
    /// get weight exactly zero; a row with no visible key outputs zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        mask: &[bool],
    ) -> Result<NodeId> {
        let nq = self.check(q)?;
        let nk = self.check(k)?;
        let nv = self.check(v)?;
        let (rq, d) = as_matrix(&nq.value, "attention")?;
        let (rk, dk) = as_matrix(&nk.value, "attention")?;
        let (rv, dv) = as_matrix(&nv.value, "attention")?;
        let AttentionShape {
            batch,
            heads,
            len_q,
            len_k,
        } = shape;
        if heads == 0
            || d % heads != 0
            || dk != d
            || dv != d
            || rq != batch * len_q
            || rk != batch * len_k
            || rv != rk
        {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: nq.value.shape().to_vec(),
                right: nk.value.shape().to_vec(),
            });
        }
        let per_batch = len_q * len_k;
        let mask = if mask.len() == per_batch {
            mask.repeat(batch)
        } else if mask.len() == batch * per_batch {
            mask.to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                left: vec![len_q, len_k],
                right: vec![mask.len()],
            });
        };
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qd = nq.value.data();
        let kd = nk.value.data();
        let vd = nv.value.data();
        let mut probs = vec![T::zero(); batch * heads * per_batch];
        let mut out = vec![T::zero(); rq * d];
        let mut scores = vec![T::zero(); len_k];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len_q {
                    let qrow = &qd[(b * len_q + i) * d + off..][..dh];
                    let mrow = &mask[b * per_batch + i * len_k..][..len_k];
                    let mut max = T::neg_infinity();
                    for j in 0..len_k {
                        if !mrow[j] {
                            continue;
                        }
                        let krow = &kd[(b * len_k + j) * d + off..][..dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let prow = &mut probs[((b * heads + h) * len_q + i) * len_k..][..len_k];
                    let mut sum = T::zero();
                    for j in 0..len_k {
                        if mrow[j] {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out[(b * len_q + i) * d + off..][..dh];
                    for j in 0..len_k {
                        if !mrow[j] {
                            continue;
                        }
                        prow[j] /= sum;
                        let p = prow[j];
                        let vrow = &vd[(b * len_k + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let tracked = nq.tracked || nk.tracked || nv.tracked;
        let out = Tensor::from_parts(vec![rq, d], out);
        ensure_finite(&out, "attention")?;
        Ok(self.push(
            out,
            tracked,
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar. Every tracked leaf gets an entry (zeros
    /// when the loss does not depend on it); untracked leaves get none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut map = HashMap::new();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.index + 1, || None);
        if root.tracked {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                map.insert(
                    NodeId { tape: self.id, index: i },
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                map.entry(NodeId { tape: self.id, index: i })
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map })
    }

    /// Gradient buffer for `id`, or `None` if it needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        let node = self.node(id);
        if !node.tracked {
            return None;
        }
        Some(grads[id.index].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.node(*a).value;
                let vb = &self.node(*b).value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, vb.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(va.data(), g, db, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let va = self.node(*a).value.data();
                let vb = self.node(*b).value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::DivScalar(x, s) => {
                let d = self.node(*s).value.data()[0];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(o, &v)| *o += v / d);
                }
                if let Some(ds) = self.slot(grads, *s) {
                    let dot: T = g.iter().zip(node.value.data()).map(|(&a, &y)| a * y).sum();
                    ds[0] -= dot / d;
                }
            }
            Op::Gelu(x) => {
                let vx = self.node(*x).value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total: T = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gam = self.node(*gamma).value.data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(c) {
                        db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_c = T::one() / T::from_f64(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for ((o, &gv), &gm) in dxhat.iter_mut().zip(grow).zip(gam) {
                            *o = gv * gm;
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_c;
                        let m2 = dxhat.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() * inv_c;
                        let out = &mut dx[r * c..(r + 1) * c];
                        for ((o, &dh), &h) in out.iter_mut().zip(&dxhat).zip(hrow) {
                            *o += rstd[r] * (dh - m1 - h * m2);
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (grow, &r) in g.chunks_exact(c).zip(index) {
                        dx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.node(*a).value.numel();
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(&g[..split]).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(&g[split..]).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.node(*x).value.numel() as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                live,
            } => {
                let classes = self.node(*logits).value.cols();
                let w = g[0] / T::from_f64(*live as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let prow = &probs[r * classes..(r + 1) * classes];
                        let drow = &mut dx[r * classes..(r + 1) * classes];
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d += w * p;
                        }
                        drow[t] -= w;
                    }
                }
            }
            Op::Bce { logits, labels } => {
                let x = self.node(*logits).value.data();
                let w = g[0] / T::from_f64(labels.len() as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    for ((d, &xv), &y) in dx.iter_mut().zip(x).zip(labels) {
                        *d += w * (sigmoid(xv) - y);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *d += (gv - yv * dot) / norm;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, mask, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        mask: &[bool],
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionShape {
            batch,
            heads,
            len_q,
            len_k,
        } = shape;
        let qd = self.node(q).value.data();
        let kd = self.node(k).value.data();
        let vd = self.node(v).value.data();
        let d = self.node(q).value.cols();
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); len_k];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len_q {
                    let mrow = &mask[(b * len_q + i) * len_k..][..len_k];
                    let prow = &probs[((b * heads + h) * len_q + i) * len_k..][..len_k];
                    let grow = &g[(b * len_q + i) * d + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..len_k {
                        if !mrow[j] {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vrow = &vd[(b * len_k + j) * d + off..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                        dot += dp[j] * prow[j];
                        let p = prow[j];
                        for (o, &gv) in dv[(b * len_k + j) * d + off..][..dh].iter_mut().zip(grow) {
                            *o += p * gv;
                        }
                    }
                    let qrow = &qd[(b * len_q + i) * d + off..][..dh];
                    for j in 0..len_k {
                        if !mrow[j] {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let krow = &kd[(b * len_k + j) * d + off..][..dh];
                        for (o, &kv) in dq[(b * len_q + i) * d + off..][..dh].iter_mut().zip(krow) {
                            *o += ds * kv;
                        }
                        for (o, &qv) in dk[(b * len_k + j) * d + off..][..dh].iter_mut().zip(qrow) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        for (id, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, id) {
                slot.iter_mut().zip(&local).for_each(|(d, &x)| *d += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn bilinear_gradient_is_other_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let b = tape.leaf(t(&[3], &[4.0, 0.25, -3.0]), true);
        let p = tape.mul(a, b).unwrap();
        let y = tape.sum(p).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 0.25, -3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn untracked_graph_has_empty_gradients() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2, 2], 1.0));
        let y = tape.sum(a).unwrap();
        assert!(tape.backward(y).unwrap().is_empty());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert_eq!(tape.backward(a).unwrap_err(), TensorError::NotScalar(vec![2]));

        let mut other = Tape::<f32>::new();
        let s = other.leaf(Tensor::scalar(1.0), true);
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::DetachedLoss);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(t(&[2], &[1.0, 1.0]), true);
        let y = tape.scale(a, 3.0).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let y = tape.cross_entropy_logits(s, &[0, 1], usize::MAX).unwrap();
        let g1 = tape.backward(y).unwrap();
        let g2 = tape.backward(y).unwrap();
        for id in [a, b] {
            assert_eq!(g1.get(id).unwrap(), g2.get(id).unwrap());
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::full(&[4], 1.0));
        let zero = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[1, 4], 3.5));
        let y = tape.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let one2 = tape.constant(Tensor::full(&[2], 1.0));
        let zero2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, one2, zero2, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        let five = tape.constant(Tensor::full(&[4], 5.0));
        let x = tape.constant(t(&[2, 4], &[0.3, -2.0, 7.0, 1.0, 9.0, 8.0, 7.0, 6.0]));
        let y = tape.layer_norm(x, zero, five, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

        let bad = tape.constant(Tensor::full(&[3], 1.0));
        assert!(matches!(
            tape.layer_norm(x, bad, five, 1e-5),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let y = tape.cross_entropy_logits(x, &[0, 3, 2], usize::MAX).unwrap();
        assert!((tape.value(y).data()[0] - 4f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[1, 3], &[30.0, 0.0, 0.0]));
        let y = tape.cross_entropy_logits(x, &[0], usize::MAX).unwrap();
        assert!(tape.value(y).data()[0] < 1e-12);

        // Live row [1, 2, 0] with target 1: logsumexp - 2.
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 0.0, 5.0, -5.0, 0.5]));
        let y = tape.cross_entropy_logits(x, &[1, 9], 9).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 1.0).ln() - 2.0;
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-12);

        assert_eq!(
            tape.cross_entropy_logits(x, &[9, 9], 9).unwrap_err(),
            TensorError::AllIgnored
        );
        assert!(matches!(
            tape.cross_entropy_logits(x, &[3, 0], 9),
            Err(TensorError::TargetOutOfRange { target: 3, classes: 3 })
        ));
    }

    #[test]
    fn attention_single_key_and_uniform_scores() {
        let mut tape = Tape::<f64>::new();
        let shape = AttentionShape {
            batch: 1,
            heads: 2,
            len_q: 3,
            len_k: 1,
        };
        let q = tape.constant(t(&[3, 4], &[0.1, 0.2, 0.3, 0.4, 1., 2., 3., 4., -1., 0., 1., 0.]));
        let kv = tape.constant(t(&[1, 4], &[0.5, -0.5, 2.0, 3.0]));
        let o = tape.attention(q, kv, kv, shape, &[true; 3]).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(o).row(r), &[0.5, -0.5, 2.0, 3.0]);
        }

        let shape = AttentionShape {
            batch: 1,
            heads: 1,
            len_q: 1,
            len_k: 3,
        };
        let q = tape.constant(t(&[1, 2], &[0.7, -0.2]));
        let k = tape.constant(t(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let v = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let o = tape.attention(q, k, v, shape, &[true; 3]).unwrap();
        let out = tape.value(o).data();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_mask_zeroes_hidden_keys() {
        let mut tape = Tape::<f32>::new();
        let shape = AttentionShape {
            batch: 1,
            heads: 1,
            len_q: 2,
            len_k: 2,
        };
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.3, 0.1, -0.4, 0.9]).unwrap());
        let causal = [true, false, true, true];
        let o = tape.attention(x, x, x, shape, &causal).unwrap();
        assert_eq!(tape.value(o).row(0), &[0.3, 0.1]);
        let w = tape.attention_weights(o).unwrap();
        assert_eq!(w[1], 0.0);
        assert!((w[2] + w[3] - 1.0).abs() < 1e-6);
    }
}
