//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding the
//! forward result and enough context to replay the chain rule backwards.
//! Tensors are flat row-major buffers; the op set is exactly what a small
//! decoder-only transformer needs, nothing more.

use rayon::prelude::*;
use thiserror::Error;

/// Scalar element type for all tensor math. Implemented for `f32` and `f64`;
/// training typically runs in `f32`, gradient and Jacobian checks in `f64`.
pub trait Scalar:
    num_traits::Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cotangent length {got} does not match tensor length {want}")]
    CotangentMismatch { got: usize, want: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
}

/// Index of a node in a [`Graph`].
pub type NodeId = usize;

/// A dense tensor value: flat row-major data plus shape metadata.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: S,
    },
    Silu {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
        axis: usize,
    },
    LayerNorm {
        input: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    },
    RmsNorm {
        input: NodeId,
        gain: Option<NodeId>,
        eps: f64,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    /// Multi-head causal self-attention over `[batch*seq, d_model]` inputs.
    /// `probs` keeps the (lower-triangular) attention weights for backward.
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
    },
    Sum {
        input: NodeId,
    },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// Wengert tape of recorded operations. Node order is creation order, which
/// is a valid topological order; `backward` walks it in reverse exactly once,
/// accumulating gradients additively at fan-out points.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> NodeId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length must match shape"
        );
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        )
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        id
    }

    fn out(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>) -> NodeId {
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Leaf,
        );
        let id = self.nodes.len() - 1;
        self.nodes[id].op = op;
        id
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].tensor
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: NodeId) -> S {
        assert_eq!(self.nodes[id].tensor.numel(), 1, "expected scalar node");
        self.nodes[id].tensor.data[0]
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut data = vec![S::zero(); m * n];
        matmul_nn(self.data(a), self.data(b), m, k, n, &mut data);
        Ok(self.out(data, vec![m, n], Op::MatMul { lhs: a, rhs: b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Add { lhs: a, rhs: b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Mul { lhs: a, rhs: b }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Scale { input: a, factor })
    }

    /// silu(x) = x * sigmoid(x), elementwise.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Silu { input: a })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut data = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        Ok(self.out(data, shape, Op::Softmax { input: a, axis }))
    }

    /// Layer normalization over the last dimension: `(x-μ)/√(σ²+eps)`,
    /// then `·gain + bias` when affine parameters are given.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on empty shape");
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let g = gain.map(|p| self.data(p).to_vec());
        let b = bias.map(|p| self.data(p).to_vec());
        let mut data = vec![S::zero(); src.len()];
        let epsv = S::from_f64(eps);
        par_rows(src, &mut data, d, |row, out| {
            let (mean, var) = mean_var(row);
            let inv = (var + epsv).sqrt().recip();
            for i in 0..d {
                let mut y = (row[i] - mean) * inv;
                if let Some(g) = &g {
                    y = y * g[i];
                }
                if let Some(b) = &b {
                    y = y + b[i];
                }
                out[i] = y;
            }
        });
        Ok(self.out(
            data,
            shape,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                eps,
            },
        ))
    }

    /// RMS normalization over the last dimension: `x/√(mean(x²)+eps)`,
    /// then `·gain` when a gain is given.
    pub fn rms_norm(
        &mut self,
        x: NodeId,
        gain: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rms_norm on empty shape");
        if let Some(p) = gain {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "rms_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let g = gain.map(|p| self.data(p).to_vec());
        let mut data = vec![S::zero(); src.len()];
        let epsv = S::from_f64(eps);
        let dv = S::from_f64(d as f64);
        par_rows(src, &mut data, d, |row, out| {
            let mut ss = S::zero();
            for &v in row {
                ss = ss + v * v;
            }
            let inv = (ss / dv + epsv).sqrt().recip();
            for i in 0..d {
                let mut y = row[i] * inv;
                if let Some(g) = &g {
                    y = y * g[i];
                }
                out[i] = y;
            }
        });
        Ok(self.out(
            data,
            shape,
            Op::RmsNorm {
                input: x,
                gain,
                eps,
            },
        ))
    }

    /// Row gather: `table[V×d]` indexed by `ids` -> `[len(ids)×d]`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let tsh = self.shape(table).to_vec();
        assert_eq!(tsh.len(), 2, "embedding table must be 2-D");
        let (vocab, d) = (tsh[0], tsh[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::TokenOutOfRange { id, vocab });
            }
        }
        let src = self.data(table);
        let mut data = vec![S::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(self.out(
            data,
            vec![ids.len(), d],
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d_model]`; head `h` occupies the column
    /// band `[h·dh, (h+1)·dh)` with `dh = d_model/heads`. Scores use the
    /// `1/√dh` scale; position `t` attends to positions `0..=t` only.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_attention",
                    lhs: shape,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if shape.len() != 2 || shape[0] != batch * seq || shape[1] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                lhs: shape,
                rhs: vec![batch * seq, heads],
            });
        }
        let d = shape[1];
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![S::zero(); qd.len()];
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        // Parallel over batches: each batch owns disjoint slices of `out`
        // and `probs`, so results are bit-identical for any thread count.
        out.par_chunks_mut(seq * d)
            .zip(probs.par_chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (out_b, probs_b))| {
                let row0 = b * seq;
                let mut kt = vec![S::zero(); dh * seq];
                for h in 0..heads {
                    let c0 = h * dh;
                    // Transposed head slice of K so score rows vectorize.
                    for u in 0..seq {
                        for c in 0..dh {
                            kt[c * seq + u] = kd[(row0 + u) * d + c0 + c];
                        }
                    }
                    let p_h = &mut probs_b[h * seq * seq..(h + 1) * seq * seq];
                    for t in 0..seq {
                        let qrow = &qd[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                        let srow = &mut p_h[t * seq..t * seq + t + 1];
                        for c in 0..dh {
                            let qc = qrow[c];
                            for (u, s) in srow.iter_mut().enumerate() {
                                *s = *s + qc * kt[c * seq + u];
                            }
                        }
                        let mut max = S::neg_infinity();
                        for s in srow.iter_mut() {
                            *s = *s * scale;
                            max = max.max(*s);
                        }
                        let mut sum = S::zero();
                        for s in srow.iter_mut() {
                            *s = (*s - max).exp();
                            sum = sum + *s;
                        }
                        for s in srow.iter_mut() {
                            *s = *s / sum;
                        }
                        let orow = &mut out_b[t * d + c0..t * d + c0 + dh];
                        for u in 0..=t {
                            let p = p_h[t * seq + u];
                            let vrow = &vd[(row0 + u) * d + c0..(row0 + u) * d + c0 + dh];
                            for c in 0..dh {
                                orow[c] = orow[c] + p * vrow[c];
                            }
                        }
                    }
                }
            });
        Ok(self.out(
            out,
            shape,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean negative log-softmax probability of the target ids.
    /// `logits` is `[rows×vocab]`, `targets` has one id per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let vocab = shape[1];
        for &t in targets {
            if t as usize >= vocab {
                return Err(TensorError::TokenOutOfRange { id: t, vocab });
            }
        }
        let rows = shape[0];
        let src = self.data(logits);
        // Per-row losses computed independently, summed in fixed row order.
        let losses: Vec<S> = src
            .par_chunks(vocab)
            .zip(targets.par_iter())
            .map(|(row, &t)| {
                let mut max = S::neg_infinity();
                for &v in row {
                    max = max.max(v);
                }
                let mut sum = S::zero();
                for &v in row {
                    sum = sum + (v - max).exp();
                }
                sum.ln() + max - row[t as usize]
            })
            .collect();
        let mut total = S::zero();
        for l in losses {
            total = total + l;
        }
        let mean = total / S::from_f64(rows as f64);
        Ok(self.out(
            vec![mean],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut total = S::zero();
        for &v in self.data(a) {
            total = total + v;
        }
        self.out(vec![total], vec![1], Op::Sum { input: a })
    }

    /// SwiGLU feed-forward: `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`.
    pub fn swiglu(
        &mut self,
        x: NodeId,
        w_gate: NodeId,
        w_up: NodeId,
        w_down: NodeId,
    ) -> Result<NodeId, TensorError> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let gated = self.mul(gate, up)?;
        self.matmul(gated, w_down)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// existing `grad` buffers; call [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_from(loss, &[S::one()])
    }

    /// Reverse-mode sweep seeding `node` with an arbitrary cotangent.
    pub fn backward_from(&mut self, node: NodeId, cotangent: &[S]) -> Result<(), TensorError> {
        let want = self.nodes[node].tensor.numel();
        if cotangent.len() != want {
            return Err(TensorError::CotangentMismatch {
                got: cotangent.len(),
                want,
            });
        }
        // Upstream gradients for this sweep live in a scratch table so that
        // repeated sweeps accumulate into leaf grads without double-counting
        // interior nodes.
        let n = self.nodes.len();
        let mut up: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        up[node] = Some(cotangent.to_vec());

        for id in (0..=node).rev() {
            let Some(g) = up[id].take() else { continue };
            self.apply_backward(id, &g, &mut up);
            let t = &mut self.nodes[id].tensor;
            match &mut t.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a = *a + *v;
                    }
                }
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn apply_backward(&mut self, id: NodeId, g: &[S], up: &mut [Option<Vec<S>>]) {
        // Split borrow: the op of `id` is read-only while input grads mutate.
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let (m, k) = (self.shape(lhs)[0], self.shape(lhs)[1]);
                let n = self.shape(rhs)[1];
                // dA = G·Bᵀ and dB = Aᵀ·G, both via the contiguous kernel.
                let bt = transpose(self.data(rhs), k, n);
                let mut da = vec![S::zero(); m * k];
                matmul_nn(g, &bt, m, n, k, &mut da);
                accumulate(up, lhs, da);
                let at = transpose(self.data(lhs), m, k);
                let mut db = vec![S::zero(); k * n];
                matmul_nn(&at, g, k, m, n, &mut db);
                accumulate(up, rhs, db);
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                accumulate(up, lhs, g.to_vec());
                accumulate(up, rhs, g.to_vec());
            }
            Op::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let da: Vec<S> = g.iter().zip(self.data(rhs)).map(|(&g, &b)| g * b).collect();
                let db: Vec<S> = g.iter().zip(self.data(lhs)).map(|(&g, &a)| g * a).collect();
                accumulate(up, lhs, da);
                accumulate(up, rhs, db);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                accumulate(up, input, g.iter().map(|&g| g * factor).collect());
            }
            Op::Silu { input } => {
                let input = *input;
                let dg: Vec<S> = g
                    .iter()
                    .zip(self.data(input))
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                accumulate(up, input, dg);
            }
            Op::Softmax { input, axis } => {
                let (input, axis) = (*input, *axis);
                let shape = self.shape(id);
                let (outer, len, inner) = axis_split(shape, axis);
                let y = self.data(id);
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            dot = dot + g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(up, input, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                let d = *self.shape(input).last().unwrap();
                let x = self.data(input);
                let gv = gain.map(|p| self.data(p).to_vec());
                let epsv = S::from_f64(eps);
                let dv = S::from_f64(d as f64);
                let mut dx = vec![S::zero(); x.len()];
                par_rows2(x, g, &mut dx, d, |row, grow, out| {
                    let (mean, var) = mean_var(row);
                    let inv = (var + epsv).sqrt().recip();
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for i in 0..d {
                        let xh = (row[i] - mean) * inv;
                        let mut dxh = grow[i];
                        if let Some(gv) = &gv {
                            dxh = dxh * gv[i];
                        }
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                        out[i] = dxh; // stash, rewritten below
                    }
                    let m1 = sum_dxh / dv;
                    let m2 = sum_dxh_xh / dv;
                    for i in 0..d {
                        let xh = (row[i] - mean) * inv;
                        out[i] = inv * (out[i] - m1 - xh * m2);
                    }
                });
                accumulate(up, input, dx);
                if let Some(p) = gain {
                    let rows = x.len() / d;
                    let mut dgain = vec![S::zero(); d];
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let (mean, var) = mean_var(row);
                        let inv = (var + epsv).sqrt().recip();
                        for i in 0..d {
                            dgain[i] = dgain[i] + g[r * d + i] * (row[i] - mean) * inv;
                        }
                    }
                    accumulate(up, p, dgain);
                }
                if let Some(p) = bias {
                    let rows = x.len() / d;
                    let mut dbias = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            dbias[i] = dbias[i] + g[r * d + i];
                        }
                    }
                    accumulate(up, p, dbias);
                }
            }
            Op::RmsNorm { input, gain, eps } => {
                let (input, gain, eps) = (*input, *gain, *eps);
                let d = *self.shape(input).last().unwrap();
                let x = self.data(input);
                let gv = gain.map(|p| self.data(p).to_vec());
                let epsv = S::from_f64(eps);
                let dv = S::from_f64(d as f64);
                let mut dx = vec![S::zero(); x.len()];
                par_rows2(x, g, &mut dx, d, |row, grow, out| {
                    let mut ss = S::zero();
                    for &v in row {
                        ss = ss + v * v;
                    }
                    let inv = (ss / dv + epsv).sqrt().recip();
                    let mut dot = S::zero();
                    for i in 0..d {
                        let mut dyg = grow[i];
                        if let Some(gv) = &gv {
                            dyg = dyg * gv[i];
                        }
                        out[i] = dyg;
                        dot = dot + dyg * row[i] * inv;
                    }
                    let m = dot / dv;
                    for i in 0..d {
                        out[i] = inv * (out[i] - row[i] * inv * m);
                    }
                });
                accumulate(up, input, dx);
                if let Some(p) = gain {
                    let rows = x.len() / d;
                    let mut dgain = vec![S::zero(); d];
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let mut ss = S::zero();
                        for &v in row {
                            ss = ss + v * v;
                        }
                        let inv = (ss / dv + epsv).sqrt().recip();
                        for i in 0..d {
                            dgain[i] = dgain[i] + g[r * d + i] * row[i] * inv;
                        }
                    }
                    accumulate(up, p, dgain);
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let d = self.shape(table)[1];
                let mut dt = vec![S::zero(); self.data(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (a, &v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a = *a + v;
                    }
                }
                accumulate(up, table, dt);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = self.shape(q)[1];
                let dh = d / heads;
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
                let mut dq = vec![S::zero(); qd.len()];
                let mut dk = vec![S::zero(); qd.len()];
                let mut dv = vec![S::zero(); qd.len()];
                dq.par_chunks_mut(seq * d)
                    .zip(dk.par_chunks_mut(seq * d))
                    .zip(dv.par_chunks_mut(seq * d))
                    .enumerate()
                    .for_each(|(b, ((dq_b, dk_b), dv_b))| {
                        let row0 = b * seq;
                        let mut vt = vec![S::zero(); dh * seq];
                        let mut ds = vec![S::zero(); seq];
                        for h in 0..heads {
                            let c0 = h * dh;
                            for u in 0..seq {
                                for c in 0..dh {
                                    vt[c * seq + u] = vd[(row0 + u) * d + c0 + c];
                                }
                            }
                            let p_h = &probs[(b * heads + h) * seq * seq..];
                            for t in 0..seq {
                                let grow = &g[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                                let prow = &p_h[t * seq..t * seq + t + 1];
                                // dV_u += p[t,u] · dO_t
                                for (u, &p) in prow.iter().enumerate() {
                                    let dst = &mut dv_b[u * d + c0..u * d + c0 + dh];
                                    for c in 0..dh {
                                        dst[c] = dst[c] + p * grow[c];
                                    }
                                }
                                // dA[t,u] = dO_t · V_u, then softmax backward.
                                let da = &mut ds[..=t];
                                for a in da.iter_mut() {
                                    *a = S::zero();
                                }
                                for c in 0..dh {
                                    let gc = grow[c];
                                    for (u, a) in da.iter_mut().enumerate() {
                                        *a = *a + gc * vt[c * seq + u];
                                    }
                                }
                                let mut dot = S::zero();
                                for (u, &p) in prow.iter().enumerate() {
                                    dot = dot + da[u] * p;
                                }
                                // dS = P ⊙ (dA − dot); dQ += dS·K·scale, dK += dSᵀ·Q·scale
                                let qrow = &qd[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                                let dqrow = &mut dq_b[t * d + c0..t * d + c0 + dh];
                                for u in 0..=t {
                                    let dsv = prow[u] * (da[u] - dot) * scale;
                                    let krow = &kd[(row0 + u) * d + c0..(row0 + u) * d + c0 + dh];
                                    let dkrow = &mut dk_b[u * d + c0..u * d + c0 + dh];
                                    for c in 0..dh {
                                        dqrow[c] = dqrow[c] + dsv * krow[c];
                                        dkrow[c] = dkrow[c] + dsv * qrow[c];
                                    }
                                }
                            }
                        }
                    });
                accumulate(up, q, dq);
                accumulate(up, k, dk);
                accumulate(up, v, dv);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let vocab = self.shape(logits)[1];
                let rows = targets.len();
                let src = self.data(logits);
                let gscale = g[0] / S::from_f64(rows as f64);
                let mut dl = vec![S::zero(); src.len()];
                dl.par_chunks_mut(vocab)
                    .zip(src.par_chunks(vocab))
                    .zip(targets.par_iter())
                    .for_each(|((drow, row), &t)| {
                        let mut max = S::neg_infinity();
                        for &v in row {
                            max = max.max(v);
                        }
                        let mut sum = S::zero();
                        for &v in row {
                            sum = sum + (v - max).exp();
                        }
                        for (c, dv) in drow.iter_mut().enumerate() {
                            let p = (row[c] - max).exp() / sum;
                            *dv = gscale * p;
                        }
                        drow[t as usize] = drow[t as usize] - gscale;
                    });
                accumulate(up, logits, dl);
            }
            Op::Sum { input } => {
                let input = *input;
                let n = self.nodes[input].tensor.numel();
                accumulate(up, input, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate<S: Scalar>(up: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
    match &mut up[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&contrib) {
                *a = *a + *v;
            }
        }
        slot => *slot = Some(contrib),
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    (S::one() + (-x).exp()).recip()
}

fn mean_var<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mut sum = S::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut ss = S::zero();
    for &v in row {
        let c = v - mean;
        ss = ss + c * c;
    }
    (mean, ss / n)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major transpose copy.
pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

const PAR_FLOP_THRESHOLD: usize = 1 << 15;

/// `out[m×n] = a[m×k] · b[k×n]`, row-major. The i-k-j loop order keeps the
/// inner loop contiguous; each output row is produced by exactly one task in
/// a fixed k-order, so the result does not depend on the thread count.
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), m * n);
    let body = |i0: usize, rows: &mut [S]| {
        for (di, orow) in rows.chunks_mut(n).enumerate() {
            let i = i0 + di;
            for p in 0..k {
                let av = a[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        let chunk = m.div_ceil(4 * rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, rows)| body(ci * chunk, rows));
    } else {
        body(0, out);
    }
}

/// Per-row map over the last dimension (one input row, one output row).
fn par_rows<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    d: usize,
    f: impl Fn(&[S], &mut [S]) + Sync,
) {
    if src.len() >= PAR_FLOP_THRESHOLD {
        dst.par_chunks_mut(d)
            .zip(src.par_chunks(d))
            .for_each(|(out, row)| f(row, out));
    } else {
        for (out, row) in dst.chunks_mut(d).zip(src.chunks(d)) {
            f(row, out);
        }
    }
}

/// Like [`par_rows`] with a second aligned input (upstream gradient rows).
fn par_rows2<S: Scalar>(
    src: &[S],
    src2: &[S],
    dst: &mut [S],
    d: usize,
    f: impl Fn(&[S], &[S], &mut [S]) + Sync,
) {
    if src.len() >= PAR_FLOP_THRESHOLD {
        dst.par_chunks_mut(d)
            .zip(src.par_chunks(d).zip(src2.par_chunks(d)))
            .for_each(|(out, (row, grow))| f(row, grow, out));
    } else {
        for (out, (row, grow)) in dst.chunks_mut(d).zip(src.chunks(d).zip(src2.chunks(d))) {
            f(row, grow, out);
        }
    }
}

/// Central finite differences: `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` per coordinate.
/// This is the independent oracle every gradient test checks against.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Max elementwise deviation relative to the largest reference entry.
    fn vec_rel_err(got: &[f64], want: &[f64]) -> f64 {
        let scale = want
            .iter()
            .chain(got.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-12);
        got.iter()
            .zip(want)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / scale
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let i2 = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false);
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false);
        let b = g.leaf(vec![1.0, 1.0], &[2, 1], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false);
        let b = g.leaf(vec![0.0; 8], &[4, 2], false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0 = randvec(&mut rng, 12);
            let b0 = randvec(&mut rng, 8);
            let w = randvec(&mut rng, 6);
            let run = |a: &[f64], b: &[f64]| -> (Graph<f64>, NodeId, NodeId, NodeId) {
                let mut g: Graph<f64> = Graph::new();
                let an = g.leaf(a.to_vec(), &[3, 4], true);
                let bn = g.leaf(b.to_vec(), &[4, 2], true);
                let c = g.matmul(an, bn).unwrap();
                let wn = g.leaf(w.clone(), &[2, 3], false);
                let prod = g.matmul(wn, c).unwrap();
                let loss = g.sum(prod);
                (g, loss, an, bn)
            };
            let (mut g, loss, an, bn) = run(&a0, &b0);
            g.backward(loss).unwrap();
            let ga = g.grad(an).unwrap().to_vec();
            let gb = g.grad(bn).unwrap().to_vec();

            let fa = finite_diff_grad(
                &mut |a| {
                    let (g, loss, _, _) = run(a, &b0);
                    g.scalar_value(loss)
                },
                &a0,
                1e-4,
            );
            let fb = finite_diff_grad(
                &mut |b| {
                    let (g, loss, _, _) = run(&a0, b);
                    g.scalar_value(loss)
                },
                &b0,
                1e-4,
            );
            assert!(vec_rel_err(&ga, &fa) < 1e-5, "seed {seed}");
            assert!(vec_rel_err(&gb, &fb) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0, 0.0, 0.0], &[3], false);
        let s = g.softmax(x, 0).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g.leaf(vec![1000.0, 0.0, 0.0], &[3], false);
        let s = g.softmax(y, 0).unwrap();
        let out = g.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x0 = randvec(&mut rng, 8);
            let w = randvec(&mut rng, 8);
            let run = |x: &[f64]| -> (Graph<f64>, NodeId, NodeId) {
                let mut g: Graph<f64> = Graph::new();
                let xn = g.leaf(x.to_vec(), &[8], true);
                let s = g.softmax(xn, 0).unwrap();
                let wn = g.leaf(w.clone(), &[8], false);
                let p = g.mul(s, wn).unwrap();
                let loss = g.sum(p);
                (g, loss, xn)
            };
            let (mut g, loss, xn) = run(&x0);
            g.backward(loss).unwrap();
            let got = g.grad(xn).unwrap().to_vec();
            let want = finite_diff_grad(
                &mut |x| {
                    let (g, loss, _) = run(x);
                    g.scalar_value(loss)
                },
                &x0,
                1e-4,
            );
            assert!(vec_rel_err(&got, &want) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn swiglu_zero_input_and_scalar_case() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0, 0.0], &[1, 2], false);
        let wg = g.leaf(vec![0.3, -0.4, 0.1, 0.9], &[2, 2], false);
        let wu = g.leaf(vec![0.5, 0.2, -0.7, 0.4], &[2, 2], false);
        let wd = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let y = g.swiglu(x, wg, wu, wd).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0], &[1, 1], false);
        let one = g.leaf(vec![1.0], &[1, 1], false);
        let y = g.swiglu(x, one, one, one).unwrap();
        let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.data(y)[0] - silu1).abs() < 1e-12);
        assert!((g.data(y)[0] - 0.731_058_578_630_0049).abs() < 1e-12);
    }

    #[test]
    fn swiglu_grads_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (d, dff) = (3, 5);
            let x0 = randvec(&mut rng, 2 * d);
            let wg0 = randvec(&mut rng, d * dff);
            let wu0 = randvec(&mut rng, d * dff);
            let wd0 = randvec(&mut rng, dff * d);
            let run = |x: &[f64], wg: &[f64], wu: &[f64], wd: &[f64]| {
                let mut g: Graph<f64> = Graph::new();
                let xn = g.leaf(x.to_vec(), &[2, d], true);
                let wgn = g.leaf(wg.to_vec(), &[d, dff], true);
                let wun = g.leaf(wu.to_vec(), &[d, dff], true);
                let wdn = g.leaf(wd.to_vec(), &[dff, d], true);
                let y = g.swiglu(xn, wgn, wun, wdn).unwrap();
                let loss = g.sum(y);
                (g, loss, [xn, wgn, wun, wdn])
            };
            let (mut g, loss, ids) = run(&x0, &wg0, &wu0, &wd0);
            g.backward(loss).unwrap();
            let inputs: [&[f64]; 4] = [&x0, &wg0, &wu0, &wd0];
            for (slot, id) in ids.iter().enumerate() {
                let got = g.grad(*id).unwrap().to_vec();
                let want = finite_diff_grad(
                    &mut |v| {
                        let mut args: Vec<&[f64]> = inputs.to_vec();
                        args[slot] = v;
                        let (g, loss, _) = run(args[0], args[1], args[2], args[3]);
                        g.scalar_value(loss)
                    },
                    inputs[slot],
                    1e-4,
                );
                assert!(vec_rel_err(&got, &want) < 1e-5, "seed {seed} slot {slot}");
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_onehot() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(vec![0.5; 8], &[2, 4], false);
        let loss = g.cross_entropy(logits, &[1, 3]).unwrap();
        assert!((g.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);

        let mut g: Graph<f64> = Graph::new();
        let mut row = vec![0.0; 5];
        row[2] = 50.0;
        let logits = g.leaf(row, &[1, 5], false);
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!(g.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(vec![0.0; 4], &[1, 4], false);
        assert!(matches!(
            g.cross_entropy(logits, &[4]),
            Err(TensorError::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn cross_entropy_grads_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x0 = randvec(&mut rng, 10);
            let targets = [rng.gen_range(0..5u32), rng.gen_range(0..5u32)];
            let run = |x: &[f64]| {
                let mut g: Graph<f64> = Graph::new();
                let xn = g.leaf(x.to_vec(), &[2, 5], true);
                let loss = g.cross_entropy(xn, &targets).unwrap();
                (g, loss, xn)
            };
            let (mut g, loss, xn) = run(&x0);
            g.backward(loss).unwrap();
            let got = g.grad(xn).unwrap().to_vec();
            let want = finite_diff_grad(
                &mut |x| {
                    let (g, loss, _) = run(x);
                    g.scalar_value(loss)
                },
                &x0,
                1e-4,
            );
            assert!(vec_rel_err(&got, &want) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0, 0.5], &[2, 2], true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0], &[3], true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        // grad(f+g) == grad(f) + grad(g), elementwise exactly.
        let x0 = vec![0.3, -0.7, 1.2];
        let build = |g: &mut Graph<f64>| -> (NodeId, NodeId, NodeId) {
            let x = g.leaf(x0.clone(), &[3], true);
            let sq = g.mul(x, x).unwrap();
            let f = g.sum(sq);
            let h = g.sum(x);
            (x, f, h)
        };
        let mut g1: Graph<f64> = Graph::new();
        let (x1, f1, h1) = build(&mut g1);
        g1.backward(f1).unwrap();
        g1.backward(h1).unwrap();
        let combined = g1.grad(x1).unwrap().to_vec();

        let mut g2: Graph<f64> = Graph::new();
        let (x2, f2, h2) = build(&mut g2);
        let total = g2.add(f2, h2).unwrap();
        g2.backward(total).unwrap();
        assert_eq!(combined, g2.grad(x2).unwrap());
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // loss = sum(x⊙x) via two separate uses of x.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![2.0, -1.0], &[2], true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true);
        let e = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum(e);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let bad = g.embed(table, &[3]);
        assert!(matches!(bad, Err(TensorError::TokenOutOfRange { .. })));
    }

    #[test]
    fn causal_attention_seq1_is_value_passthrough() {
        // With a single position, attention weights are exactly [1].
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(vec![0.3, -0.2], &[1, 2], false);
        let k = g.leaf(vec![0.9, 0.1], &[1, 2], false);
        let v = g.leaf(vec![5.0, -7.0], &[1, 2], false);
        let o = g.causal_attention(q, k, v, 1, 1, 1).unwrap();
        assert_eq!(g.data(o), &[5.0, -7.0]);
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        // Output at position 0 must not depend on later V rows.
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(vec![0.1, 0.2, 0.3, 0.4], &[2, 2], false);
        let k = g.leaf(vec![0.5, 0.6, 0.7, 0.8], &[2, 2], false);
        let v1 = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false);
        let o1 = g.causal_attention(q, k, v1, 1, 2, 1).unwrap();
        let v2 = g.leaf(vec![1.0, 2.0, -99.0, 77.0], &[2, 2], false);
        let o2 = g.causal_attention(q, k, v2, 1, 2, 1).unwrap();
        assert_eq!(g.data(o1)[..2], g.data(o2)[..2]);
    }

    #[test]
    fn causal_attention_grads_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let (batch, seq, heads, d) = (2, 3, 2, 4);
            let n = batch * seq * d;
            let q0 = randvec(&mut rng, n);
            let k0 = randvec(&mut rng, n);
            let v0 = randvec(&mut rng, n);
            let w = randvec(&mut rng, n);
            let run = |q: &[f64], k: &[f64], v: &[f64]| {
                let mut g: Graph<f64> = Graph::new();
                let qn = g.leaf(q.to_vec(), &[batch * seq, d], true);
                let kn = g.leaf(k.to_vec(), &[batch * seq, d], true);
                let vn = g.leaf(v.to_vec(), &[batch * seq, d], true);
                let o = g.causal_attention(qn, kn, vn, batch, seq, heads).unwrap();
                let wn = g.leaf(w.clone(), &[batch * seq, d], false);
                let p = g.mul(o, wn).unwrap();
                let loss = g.sum(p);
                (g, loss, [qn, kn, vn])
            };
            let (mut g, loss, ids) = run(&q0, &k0, &v0);
            g.backward(loss).unwrap();
            let inputs: [&[f64]; 3] = [&q0, &k0, &v0];
            for (slot, id) in ids.iter().enumerate() {
                let got = g.grad(*id).unwrap().to_vec();
                let want = finite_diff_grad(
                    &mut |x| {
                        let mut args: Vec<&[f64]> = inputs.to_vec();
                        args[slot] = x;
                        let (g, loss, _) = run(args[0], args[1], args[2]);
                        g.scalar_value(loss)
                    },
                    inputs[slot],
                    1e-4,
                );
                assert!(vec_rel_err(&got, &want) < 1e-5, "seed {seed} slot {slot}");
            }
        }
    }

    #[test]
    fn layer_norm_and_rms_norm_grads_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let d = 6;
            let x0 = randvec(&mut rng, 2 * d);
            let g0 = randvec(&mut rng, d);
            let b0 = randvec(&mut rng, d);
            let w = randvec(&mut rng, 2 * d);
            for rms in [false, true] {
                let run = |x: &[f64], gain: &[f64], bias: &[f64]| {
                    let mut g: Graph<f64> = Graph::new();
                    let xn = g.leaf(x.to_vec(), &[2, d], true);
                    let gn = g.leaf(gain.to_vec(), &[d], true);
                    let bn = g.leaf(bias.to_vec(), &[d], true);
                    let y = if rms {
                        g.rms_norm(xn, Some(gn), 1e-5).unwrap()
                    } else {
                        g.layer_norm(xn, Some(gn), Some(bn), 1e-5).unwrap()
                    };
                    let wn = g.leaf(w.clone(), &[2, d], false);
                    let p = g.mul(y, wn).unwrap();
                    let loss = g.sum(p);
                    (g, loss, [xn, gn, bn])
                };
                let (mut g, loss, ids) = run(&x0, &g0, &b0);
                g.backward(loss).unwrap();
                let inputs: [&[f64]; 3] = [&x0, &g0, &b0];
                let nslots = if rms { 2 } else { 3 };
                for slot in 0..nslots {
                    let got = g.grad(ids[slot]).unwrap().to_vec();
                    let want = finite_diff_grad(
                        &mut |v| {
                            let mut args: Vec<&[f64]> = inputs.to_vec();
                            args[slot] = v;
                            let (g, loss, _) = run(args[0], args[1], args[2]);
                            g.scalar_value(loss)
                        },
                        inputs[slot],
                        1e-4,
                    );
                    assert!(
                        vec_rel_err(&got, &want) < 1e-5,
                        "seed {seed} rms {rms} slot {slot}"
                    );
                }
            }
        }
    }

    #[test]
    fn finite_diff_is_exact_on_quadratics() {
        let got = finite_diff_grad(&mut |x| x[0] * x[0], &[3.0], 1e-4);
        assert!((got[0] - 6.0).abs() < 1e-6);
        let got = finite_diff_grad(&mut |x| x.iter().sum(), &[1.0, 2.0, 3.0], 1e-3);
        for v in got {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn determinism_same_inputs_bitwise_equal() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let q: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let a = g.leaf(q.clone(), &[8, 8], true);
            let b = g.leaf(q.clone(), &[8, 8], true);
            let c = g.matmul(a, b).unwrap();
            let n = g.rms_norm(c, None, 1e-5).unwrap();
            let loss = g.sum(n);
            g.backward(loss).unwrap();
            (g.data(c).to_vec(), g.grad(a).unwrap().to_vec())
        };
        let (c1, g1) = run();
        let (c2, g2) = run();
        assert_eq!(c1, c2);
        assert_eq!(g1, g2);
    }
}
