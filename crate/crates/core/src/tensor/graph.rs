//! Define-by-run tape for reverse-mode differentiation.
//!
//! Ops append nodes to the graph in execution order, which is already
//! a topological order, so the backward pass is a single reverse sweep
//! that visits every node exactly once. A graph is single-use: one
//! forward build, at most one backward.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Boolean allow-matrix for attention: `allow[i][j]` means query
/// position i may attend to key position j.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    tq: usize,
    tk: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(tq: usize, tk: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != tq * tk {
            return Err(Error::ShapeMismatch {
                op: "AttentionMask::new",
                left: vec![tq, tk],
                right: vec![allow.len()],
            });
        }
        Ok(AttentionMask { tq, tk, allow })
    }

    pub fn tq(&self) -> usize {
        self.tq
    }

    pub fn tk(&self) -> usize {
        self.tk
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.tk + j]
    }

    pub fn allow(&self) -> &[bool] {
        &self.allow
    }

    /// Count of allowed cells.
    pub fn num_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }
}

/// Loss reduction over counted positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T: Element> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        broadcast_rows: bool,
    },
    Softmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: TensorId,
    },
    Embedding {
        table: TensorId,
        ids: Vec<u32>,
    },
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<u32>,
        ignore_id: u32,
        probs: Vec<T>,
        count: usize,
        reduction: Reduction,
        smoothing: T,
    },
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    Rows {
        x: TensorId,
        start: usize,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
}

struct Node<T: Element> {
    tensor: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. `Graph::new()` records for backward; `Graph::inference()`
/// computes values only.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, TensorId)>,
    recording: bool,
    backward_done: bool,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Value-only graph: no saved activations, backward is an error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: false,
            backward_done: false,
        }
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        debug_assert!(
            tensor.all_finite(),
            "non-finite value produced by a graph op"
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op: if self.recording { op } else { Op::Leaf },
            requires_grad: requires_grad && self.recording,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a non-differentiable input value.
    pub fn constant(&mut self, tensor: Tensor<T>) -> TensorId {
        self.push(tensor, Op::Leaf, false)
    }

    /// Insert a named parameter leaf (cloned from the model's store).
    /// Its gradient is available through [`Graph::param_grads`] after
    /// backward.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> TensorId {
        let mut t = tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        let id = self.push(t, Op::Leaf, true);
        if self.recording {
            self.params.push((name.to_string(), id));
        }
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a node, if backward has run and the node needed one.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Named parameter gradients after backward. Parameters that did
    /// not participate in the loss get a zero gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params.iter().filter_map(move |(name, id)| {
            self.nodes[id.0]
                .tensor
                .grad
                .as_deref()
                .map(|g| (name.as_str(), g))
        })
    }

    fn shape2(&self, id: TensorId) -> (usize, usize) {
        let s = self.value(id).shape();
        (s[0], s[1])
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape2(a);
        let (kb, n) = self.shape2(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, rg))
    }

    /// Elementwise add; `b` may also be a vector broadcast across the
    /// rows of a 2D `a`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let broadcast_rows = sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1];
        if !broadcast_rows && sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let bd = self.value(b).data();
        let data: Vec<T> = if broadcast_rows {
            let c = sa[1];
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bd[i % c])
                .collect()
        } else {
            self.value(a)
                .data()
                .iter()
                .zip(bd)
                .map(|(&x, &y)| x + y)
                .collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(sa, data)?,
            Op::Add {
                a,
                b,
                broadcast_rows,
            },
            rg,
        ))
    }

    /// Row softmax over the last axis of a 2D tensor.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape2(x);
        let mut data = self.value(x).data().to_vec();
        kernels::softmax_rows(&mut data, r, c);
        let rg = self.requires(x);
        self.push(
            Tensor::new(vec![r, c], data).expect("softmax preserves shape"),
            Op::Softmax { x },
            rg,
        )
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.shape2(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: vec![c],
                right: vec![self.value(gain).numel(), self.value(bias).numel()],
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            T::from_f64(eps),
            r,
            c,
        );
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<T> = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.push(
            Tensor::new(shape, data).expect("gelu preserves shape"),
            Op::Gelu { x },
            rg,
        )
    }

    /// Row gather: out[t] = table[ids[t]].
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (v, d) = self.shape2(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IndexOutOfRange {
                    id: id as usize,
                    bound: v,
                });
            }
            data.extend_from_slice(self.value(table).row(id as usize));
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over projected streams.
    /// Heads are split from the feature axis, attended independently,
    /// and concatenated; any output projection is the caller's.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<TensorId> {
        let (tq, d) = self.shape2(q);
        let (tk, dk) = self.shape2(k);
        let (tv, dv) = self.shape2(v);
        if dk != d || dv != d || tv != tk {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![tq, d],
                right: vec![tk, dk, tv, dv],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: hidden size {d} not divisible by heads {heads}"
            )));
        }
        if let Some(m) = mask {
            if m.tq() != tq || m.tk() != tk {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    left: vec![tq, tk],
                    right: vec![m.tq(), m.tk()],
                });
            }
        }
        let (out, probs) = kernels::multi_head_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            tq,
            tk,
            d,
            heads,
            mask.map(AttentionMask::allow),
        );
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Token-level cross entropy against `labels`; positions whose
    /// label equals `ignore_id` contribute zero loss and zero gradient.
    /// Reduction is the mean over counted positions (0.0 when every
    /// position is ignored).
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u32],
        ignore_id: u32,
    ) -> Result<TensorId> {
        self.cross_entropy_with(logits, labels, ignore_id, Reduction::Mean, 0.0)
    }

    /// Cross entropy with explicit reduction and label smoothing.
    pub fn cross_entropy_with(
        &mut self,
        logits: TensorId,
        labels: &[u32],
        ignore_id: u32,
        reduction: Reduction,
        smoothing: f64,
    ) -> Result<TensorId> {
        let (t, vocab) = self.shape2(logits);
        if labels.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t],
                right: vec![labels.len()],
            });
        }
        let eps = T::from_f64(smoothing);
        let one = T::one();
        let vn = T::from_f64(vocab as f64);
        let mut probs = vec![T::zero(); t * vocab];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            if label == ignore_id {
                continue;
            }
            if label as usize >= vocab {
                return Err(Error::IndexOutOfRange {
                    id: label as usize,
                    bound: vocab,
                });
            }
            let row = self.value(logits).row(i);
            let lse = kernels::log_sum_exp(row);
            // (1-eps)*nll(label) + eps * mean_j nll(j)
            let nll_label = lse - row[label as usize];
            let mut loss = (one - eps) * nll_label;
            if smoothing > 0.0 {
                let mut mean_nll = T::zero();
                for &x in row {
                    mean_nll = mean_nll + (lse - x);
                }
                loss = loss + eps * mean_nll / vn;
            }
            total = total + loss;
            count += 1;
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            for (j, &x) in row.iter().enumerate() {
                prow[j] = (x - lse).exp();
            }
        }
        let value = match reduction {
            Reduction::Mean => {
                if count == 0 {
                    T::zero()
                } else {
                    total / T::from_f64(count as f64)
                }
            }
            Reduction::Sum => total,
        };
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_id,
                probs,
                count,
                reduction,
                smoothing: eps,
            },
            rg,
        ))
    }

    /// Inverted dropout: keeps each element with probability `1-rate`
    /// and rescales by `1/(1-rate)`. `rate == 0` is the identity.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut impl Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(x);
        let data: Vec<T> = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg))
    }

    /// Copy of rows [start, start+len) of a 2D tensor.
    pub fn rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape2(x);
        if start + len > r {
            return Err(Error::IndexOutOfRange {
                id: start + len,
                bound: r + 1,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::Rows { x, start }, rg))
    }

    /// Vertical concatenation of 2D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of zero tensors".into()));
        }
        let c = self.shape2(parts[0]).1;
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.shape2(p);
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![c],
                    right: vec![pc],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root, seeding its gradient with 1.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::GraphUsage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_seeded(root, &[T::one()])
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_seeded(&mut self, root: TensorId, seed: &[T]) -> Result<()> {
        if !self.recording {
            return Err(Error::GraphUsage(
                "backward on an inference graph; build with Graph::new to record".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::GraphUsage(
                "backward already ran on this graph; run a new forward first".into(),
            ));
        }
        if seed.len() != self.value(root).numel() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                left: self.value(root).shape().to_vec(),
                right: vec![seed.len()],
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(seed.to_vec());

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    self.nodes[i].tensor.grad = Some(g);
                }
            }
        }
        // Parameters untouched by the root still get a defined (zero) grad.
        for (_, id) in &self.params {
            let node = &mut self.nodes[id.0];
            if node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![T::zero(); node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        id: TensorId,
        contribution: impl IntoIterator<Item = T>,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].tensor.numel();
        let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); numel]);
        for (dst, src) in slot.iter_mut().zip(contribution) {
            *dst = *dst + src;
        }
    }

    fn apply_backward(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape2(*a);
                let n = self.shape2(*b).1;
                // dA = dC * B^T, dB = A^T * dC
                let da = kernels::matmul_nt(gout, self.value(*b).data(), m, n, k);
                let db = kernels::matmul_tn(self.value(*a).data(), gout, m, k, n);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add {
                a,
                b,
                broadcast_rows,
            } => {
                self.accumulate(grads, *a, gout.iter().copied());
                if *broadcast_rows {
                    let c = self.value(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for (idx, &g) in gout.iter().enumerate() {
                        db[idx % c] = db[idx % c] + g;
                    }
                    self.accumulate(grads, *b, db);
                } else {
                    self.accumulate(grads, *b, gout.iter().copied());
                }
            }
            Op::Softmax { x } => {
                let (r, c) = self.shape2(*x);
                let y = self.nodes[i].tensor.data();
                let mut dx = vec![T::zero(); r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &gout[row * c..(row + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + ys[j] * gs[j];
                    }
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.shape2(*x);
                let g = self.value(*gain).data();
                let cn = T::from_f64(c as f64);
                let mut dx = vec![T::zero(); r * c];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for row in 0..r {
                    let hs = &xhat[row * c..(row + 1) * c];
                    let gs = &gout[row * c..(row + 1) * c];
                    let mut sum_gy = T::zero();
                    let mut sum_gyh = T::zero();
                    for j in 0..c {
                        let gy = g[j] * gs[j];
                        sum_gy = sum_gy + gy;
                        sum_gyh = sum_gyh + gy * hs[j];
                        dgain[j] = dgain[j] + gs[j] * hs[j];
                        dbias[j] = dbias[j] + gs[j];
                    }
                    let mean_gy = sum_gy / cn;
                    let mean_gyh = sum_gyh / cn;
                    for j in 0..c {
                        let gy = g[j] * gs[j];
                        dx[row * c + j] = (gy - mean_gy - hs[j] * mean_gyh) * inv_std[row];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Gelu { x } => {
                let xs = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    xs.iter()
                        .zip(gout)
                        .map(|(&v, &g)| g * kernels::gelu_grad(v)),
                );
            }
            Op::Embedding { table, ids } => {
                if !self.nodes[table.0].requires_grad {
                    return;
                }
                let (v, d) = self.shape2(*table);
                let mut dt = vec![T::zero(); v * d];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &gout[t * d..(t + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j] + src[j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = self.shape2(*q);
                let tk = self.shape2(*k).0;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let mut dq = vec![T::zero(); tq * d];
                let mut dk = vec![T::zero(); tk * d];
                let mut dv = vec![T::zero(); tk * d];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    for qi in 0..tq {
                        let go = &gout[qi * d + off..qi * d + off + dh];
                        // dP[i,j] = dOut_i . V_j ; dV_j += P[i,j] dOut_i
                        let mut dp = vec![T::zero(); tk];
                        for j in 0..tk {
                            let w = p[qi * tk + j];
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            let mut s = T::zero();
                            for t in 0..dh {
                                s = s + go[t] * vj[t];
                                dvj[t] = dvj[t] + w * go[t];
                            }
                            dp[j] = s;
                        }
                        // softmax jvp per query row
                        let mut dot = T::zero();
                        for j in 0..tk {
                            dot = dot + dp[j] * p[qi * tk + j];
                        }
                        for j in 0..tk {
                            let ds = p[qi * tk + j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let qrow = &qd[qi * d + off..qi * d + off + dh];
                            let krow = &kd[j * d + off..j * d + off + dh];
                            let dqrow = &mut dq[qi * d + off..qi * d + off + dh];
                            let dkrow = &mut dk[j * d + off..j * d + off + dh];
                            for t in 0..dh {
                                dqrow[t] = dqrow[t] + ds * krow[t];
                                dkrow[t] = dkrow[t] + ds * qrow[t];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_id,
                probs,
                count,
                reduction,
                smoothing,
            } => {
                if *count == 0 {
                    return;
                }
                let (t, vocab) = self.shape2(*logits);
                let w = match reduction {
                    Reduction::Mean => gout[0] / T::from_f64(*count as f64),
                    Reduction::Sum => gout[0],
                };
                let eps = *smoothing;
                // target distribution: (1-eps) one-hot + eps/V everywhere
                let uniform = eps / T::from_f64(vocab as f64);
                let mut dl = vec![T::zero(); t * vocab];
                for (pos, &label) in labels.iter().enumerate() {
                    if label == *ignore_id {
                        continue;
                    }
                    let prow = &probs[pos * vocab..(pos + 1) * vocab];
                    let drow = &mut dl[pos * vocab..(pos + 1) * vocab];
                    for j in 0..vocab {
                        let hard = if j == label as usize { T::one() } else { T::zero() };
                        let tgt = (T::one() - eps) * hard + uniform;
                        drow[j] = w * (prow[j] - tgt);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gout.iter().zip(mask).map(|(&g, &m)| g * m));
            }
            Op::Rows { x, start } => {
                let c = self.shape2(*x).1;
                let total = self.value(*x).numel();
                let mut dx = vec![T::zero(); total];
                dx[start * c..start * c + gout.len()].copy_from_slice(gout);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, gout[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
