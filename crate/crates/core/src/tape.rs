//! Reverse-mode automatic differentiation on a flat op tape.
//!
//! Ops are recorded in execution order and evaluated eagerly; `backward` walks
//! the record once in reverse. The op set is exactly what a small ViT with
//! low-rank adapters and an LSTM router needs — no broadcasting beyond
//! bias-add, no dynamic shapes. Everything is f32; see `gradcheck` for the
//! f64 replay used to validate gradients.

use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, scatter_lead_add, Tensor};
use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// Constant input: no gradient is accumulated.
    Input,
    /// Named trainable parameter.
    Leaf,
    SliceLead {
        x: NodeId,
        dims: Vec<usize>,
    },
    /// y = x · wᵀ for x: [n × in], w: [out × in].
    MatmulNT {
        x: NodeId,
        w: NodeId,
    },
    /// y = a · b for a: [n × k], b: [k × m].
    MatmulNN {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Matrix plus a row vector broadcast over rows.
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    /// x: [repeat·t × c] plus rows: [t × c] tiled over x's row blocks.
    AddRowsTiled {
        x: NodeId,
        rows: NodeId,
    },
    /// Prepend one shared class-token row per image.
    InsertClassRows {
        x: NodeId,
        cls: NodeId,
        batch: usize,
        patches: usize,
    },
    Scale {
        x: NodeId,
        c: f32,
    },
    /// Multiply a tensor by a scalar node (both differentiable).
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    RowSoftmax {
        x: NodeId,
    },
    /// Fused multi-head self-attention over per-head-grouped qkv columns.
    Attention {
        qkv: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    IndexScalar {
        x: NodeId,
        row: usize,
        col: usize,
    },
    SumAll {
        x: NodeId,
    },
    /// Mean cross-entropy over rows, log-sum-exp stabilized.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    /// Forward-pass cache (attention keeps its softmax probabilities here).
    aux: Vec<f32>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Wengert list: eagerly evaluated op record plus a parameter registry.
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
            macs: 0,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Multiply-accumulate count of every matmul/attention recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registered (name, node) pairs in registration order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.leaves.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Gradients of all registered leaves by name; absent entries got no
    /// gradient flow.
    pub fn leaf_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for (name, id) in &self.leaves {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f32>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, Vec::new())
    }

    pub fn leaf(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, Vec::new());
        self.leaves.push((name.to_string(), id));
        id
    }

    pub fn slice_lead(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let xs = self.value(x);
        if dims.len() != xs.shape().len() || dims.iter().zip(xs.shape()).any(|(d, s)| d > s) {
            return Err(TapeError::ShapeMismatch {
                op: "slice_lead",
                lhs: xs.shape().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let value = xs.slice_lead(dims);
        Ok(self.push(
            Op::SliceLead {
                x,
                dims: dims.to_vec(),
            },
            value,
            Vec::new(),
        ))
    }

    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.cols() != ws.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nt",
                lhs: xs.shape().to_vec(),
                rhs: ws.shape().to_vec(),
            });
        }
        let (m, k, n) = (xs.rows(), xs.cols(), ws.rows());
        let mut value = Tensor::zeros(&[m, n]);
        matmul_nt_acc(xs.data(), ws.data(), value.data_mut(), m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Op::MatmulNT { x, w }, value, Vec::new()))
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.value(a), self.value(b));
        if as_.cols() != bs.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nn",
                lhs: as_.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let (m, k, n) = (as_.rows(), as_.cols(), bs.cols());
        let mut value = Tensor::zeros(&[m, n]);
        matmul_nn_acc(as_.data(), bs.data(), value.data_mut(), m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Op::MatmulNN { a, b }, value, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.value(a), self.value(b));
        if as_.shape() != bs.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                lhs: as_.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let data = as_.iter().zip(bs.iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(as_.shape().to_vec(), data);
        Ok(self.push(Op::Add { a, b }, value, Vec::new()))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.value(x), self.value(b));
        if bs.shape().len() != 1 || bs.cols() != xs.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let cols = xs.cols();
        let mut value = xs.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bs.data()[i % cols];
        }
        Ok(self.push(Op::AddBias { x, b }, value, Vec::new()))
    }

    pub fn add_rows_tiled(&mut self, x: NodeId, rows: NodeId, repeat: usize) -> Result<NodeId> {
        let (xs, rs) = (self.value(x), self.value(rows));
        if xs.cols() != rs.cols() || xs.rows() != rs.rows() * repeat {
            return Err(TapeError::ShapeMismatch {
                op: "add_rows_tiled",
                lhs: xs.shape().to_vec(),
                rhs: rs.shape().to_vec(),
            });
        }
        let tile = rs.numel();
        let mut value = xs.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rs.data()[i % tile];
        }
        Ok(self.push(Op::AddRowsTiled { x, rows }, value, Vec::new()))
    }

    pub fn insert_class_rows(
        &mut self,
        x: NodeId,
        cls: NodeId,
        batch: usize,
        patches: usize,
    ) -> Result<NodeId> {
        let (xs, cs) = (self.value(x), self.value(cls));
        if xs.rows() != batch * patches || cs.rows() != 1 || cs.cols() != xs.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "insert_class_rows",
                lhs: xs.shape().to_vec(),
                rhs: cs.shape().to_vec(),
            });
        }
        let c = xs.cols();
        let t = patches + 1;
        let mut value = Tensor::zeros(&[batch * t, c]);
        for i in 0..batch {
            value.data_mut()[i * t * c..i * t * c + c].copy_from_slice(cs.data());
            value.data_mut()[(i * t + 1) * c..(i + 1) * t * c]
                .copy_from_slice(&xs.data()[i * patches * c..(i + 1) * patches * c]);
        }
        Ok(self.push(
            Op::InsertClassRows {
                x,
                cls,
                batch,
                patches,
            },
            value,
            Vec::new(),
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.value(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data);
        self.push(Op::Scale { x, c }, value, Vec::new())
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(TapeError::ShapeMismatch {
                op: "scale_by",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).scalar_value();
        let data = self.value(x).iter().map(|v| v * sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data);
        Ok(self.push(Op::ScaleBy { x, s }, value, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.value(a), self.value(b));
        if as_.shape() != bs.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "mul",
                lhs: as_.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let data = as_.iter().zip(bs.iter()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(as_.shape().to_vec(), data);
        Ok(self.push(Op::Mul { a, b }, value, Vec::new()))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).iter().map(|&v| sigmoid_f32(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data);
        self.push(Op::Sigmoid { x }, value, Vec::new())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data);
        self.push(Op::Tanh { x }, value, Vec::new())
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).iter().map(|&v| gelu_f32(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data);
        self.push(Op::Gelu { x }, value, Vec::new())
    }

    /// Layer norm over the last axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let (xs, gs, bs) = (self.value(x), self.value(gain), self.value(bias));
        let c = xs.cols();
        if gs.numel() != c || bs.numel() != c {
            return Err(TapeError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs.shape().to_vec(),
                rhs: gs.shape().to_vec(),
            });
        }
        let mut value = Tensor::zeros(xs.shape());
        for r in 0..xs.rows() {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                value.data_mut()[r * c + j] =
                    (row[j] - mean) * rstd * gs.data()[j] + bs.data()[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value, Vec::new()))
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let c = xs.cols();
        let mut value = Tensor::zeros(xs.shape());
        for r in 0..xs.rows() {
            let row = &xs.data()[r * c..(r + 1) * c];
            softmax_into(row, &mut value.data_mut()[r * c..(r + 1) * c]);
        }
        self.push(Op::RowSoftmax { x }, value, Vec::new())
    }

    /// Multi-head self-attention. `qkv` is [batch·tokens × 3·heads·head_dim]
    /// with head h owning columns [3·head_dim·h, 3·head_dim·(h+1)) as its
    /// (Q, K, V) triple; output is [batch·tokens × heads·head_dim] with head
    /// h's context in columns [head_dim·h, head_dim·(h+1)).
    pub fn attention(
        &mut self,
        qkv: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<NodeId> {
        let qs = self.value(qkv);
        if qs.rows() != batch * tokens || qs.cols() != 3 * heads * head_dim {
            return Err(TapeError::ShapeMismatch {
                op: "attention",
                lhs: qs.shape().to_vec(),
                rhs: vec![batch * tokens, 3 * heads * head_dim],
            });
        }
        let (t, hd) = (tokens, head_dim);
        let cols_in = 3 * heads * hd;
        let cols_out = heads * hd;
        let inv_s = 1.0 / (hd as f32).sqrt();
        let mut value = Tensor::zeros(&[batch * t, cols_out]);
        let mut probs = vec![0.0f32; batch * heads * t * t];
        let mut scores = vec![0.0f32; t];
        for i in 0..batch {
            for h in 0..heads {
                let base = 3 * hd * h;
                let at = |tok: usize, col: usize| qs.data()[(i * t + tok) * cols_in + base + col];
                let a = &mut probs[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
                for u in 0..t {
                    for (w, s) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for d in 0..hd {
                            acc += at(u, d) * at(w, hd + d);
                        }
                        *s = acc * inv_s;
                    }
                    softmax_into(&scores, &mut a[u * t..(u + 1) * t]);
                }
                for u in 0..t {
                    for d in 0..hd {
                        let mut acc = 0.0f32;
                        for w in 0..t {
                            acc += a[u * t + w] * at(w, 2 * hd + d);
                        }
                        value.data_mut()[(i * t + u) * cols_out + h * hd + d] = acc;
                    }
                }
            }
        }
        self.macs += 2 * (batch * heads * t * t * hd) as u64;
        Ok(self.push(
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                head_dim,
            },
            value,
            probs,
        ))
    }

    /// Attention probabilities cached by an `attention` node, flattened as
    /// [batch][head][query][key]. Test/diagnostic accessor.
    pub fn attention_probs(&self, id: NodeId) -> &[f32] {
        assert!(
            matches!(self.nodes[id.0].op, Op::Attention { .. }),
            "node is not an attention op"
        );
        &self.nodes[id.0].aux
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xs = self.value(x);
        if rows.is_empty() {
            return Err(TapeError::EmptyInput { op: "gather_rows" });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xs.rows()) {
            return Err(TapeError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                shape: xs.shape().to_vec(),
            });
        }
        let c = xs.cols();
        let mut value = Tensor::zeros(&[rows.len(), c]);
        for (j, &r) in rows.iter().enumerate() {
            value.data_mut()[j * c..(j + 1) * c].copy_from_slice(&xs.data()[r * c..(r + 1) * c]);
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x);
        if start + len > xs.cols() {
            return Err(TapeError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                shape: xs.shape().to_vec(),
            });
        }
        let (rows, c) = (xs.rows(), xs.cols());
        let mut value = Tensor::zeros(&[rows, len]);
        for r in 0..rows {
            value.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&xs.data()[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, value, Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TapeError::EmptyInput { op: "concat_rows" });
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, c], data),
            Vec::new(),
        ))
    }

    pub fn index_scalar(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let xs = self.value(x);
        if row >= xs.rows() || col >= xs.cols() {
            return Err(TapeError::IndexOutOfBounds {
                op: "index_scalar",
                index: row * xs.cols() + col,
                shape: xs.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(xs.data()[row * xs.cols() + col]);
        Ok(self.push(Op::IndexScalar { x, row, col }, value, Vec::new()))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).iter().sum());
        self.push(Op::SumAll { x }, value, Vec::new())
    }

    /// Mean cross-entropy between logit rows and integer labels. The batch
    /// mean is accumulated in f64 before narrowing.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits);
        if labels.len() != ls.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = ls.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TapeError::IndexOutOfBounds {
                op: "cross_entropy",
                index: bad,
                shape: ls.shape().to_vec(),
            });
        }
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ls.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += (lse - row[label]) as f64;
        }
        let value = Tensor::scalar((total / labels.len() as f64) as f32);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            Vec::new(),
        ))
    }

    /// One LSTM step with standard gates (input, forget, cell, output in that
    /// column order within the fused gate vector).
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        params: &LstmParams,
        hidden: usize,
    ) -> Result<(NodeId, NodeId)> {
        let xi = self.matmul_nt(x, params.w_ih)?;
        let hi = self.matmul_nt(h, params.w_hh)?;
        let pre = self.add(xi, hi)?;
        let gates = self.add_bias(pre, params.bias)?;
        let i_raw = self.slice_cols(gates, 0, hidden)?;
        let f_raw = self.slice_cols(gates, hidden, hidden)?;
        let g_raw = self.slice_cols(gates, 2 * hidden, hidden)?;
        let o_raw = self.slice_cols(gates, 3 * hidden, hidden)?;
        let i = self.sigmoid(i_raw);
        let f = self.sigmoid(f_raw);
        let g = self.tanh(g_raw);
        let o = self.sigmoid(o_raw);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let c_act = self.tanh(c_next);
        let h_next = self.mul(o, c_act)?;
        Ok((h_next, c_next))
    }

    /// Reverse pass from a scalar node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(TapeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.iter()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::SliceLead { x, dims } => {
                let parent = self.value(*x);
                let mut gx = Tensor::zeros(parent.shape());
                scatter_lead_add(gx.data_mut(), parent.shape(), gy.data(), dims);
                self.accumulate(grads, *x, gx);
            }
            Op::MatmulNT { x, w } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xs.rows(), xs.cols(), ws.rows());
                let mut gx = Tensor::zeros(xs.shape());
                matmul_nn_acc(gy.data(), ws.data(), gx.data_mut(), m, n, k);
                self.accumulate(grads, *x, gx);
                let mut gw = Tensor::zeros(ws.shape());
                matmul_tn_acc(gy.data(), xs.data(), gw.data_mut(), n, m, k);
                self.accumulate(grads, *w, gw);
            }
            Op::MatmulNN { a, b } => {
                let (as_, bs) = (self.value(*a), self.value(*b));
                let (m, k, n) = (as_.rows(), as_.cols(), bs.cols());
                let mut ga = Tensor::zeros(as_.shape());
                matmul_nt_acc(gy.data(), bs.data(), ga.data_mut(), m, n, k);
                self.accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(bs.shape());
                matmul_tn_acc(as_.data(), gy.data(), gb.data_mut(), k, m, n);
                self.accumulate(grads, *b, gb);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, gy.clone());
                let c = self.value(*x).cols();
                let mut gb = Tensor::zeros(&[c]);
                for (i, v) in gy.iter().enumerate() {
                    gb.data_mut()[i % c] += v;
                }
                self.accumulate(grads, *b, gb);
            }
            Op::AddRowsTiled { x, rows } => {
                self.accumulate(grads, *x, gy.clone());
                let tile = self.value(*rows).numel();
                let mut gr = Tensor::zeros(self.value(*rows).shape());
                for (i, v) in gy.iter().enumerate() {
                    gr.data_mut()[i % tile] += v;
                }
                self.accumulate(grads, *rows, gr);
            }
            Op::InsertClassRows {
                x,
                cls,
                batch,
                patches,
            } => {
                let c = self.value(*x).cols();
                let t = patches + 1;
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let mut gc = Tensor::zeros(self.value(*cls).shape());
                for i in 0..*batch {
                    for (a, b) in gc
                        .data_mut()
                        .iter_mut()
                        .zip(&gy.data()[i * t * c..i * t * c + c])
                    {
                        *a += b;
                    }
                    gx.data_mut()[i * patches * c..(i + 1) * patches * c]
                        .copy_from_slice(&gy.data()[(i * t + 1) * c..(i + 1) * t * c]);
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *cls, gc);
            }
            Op::Scale { x, c } => {
                let data = gy.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), data));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).scalar_value();
                let data = gy.iter().map(|v| v * sv).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), data));
                let ds: f32 = self.value(*x).iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::Mul { a, b } => {
                let (as_, bs) = (self.value(*a), self.value(*b));
                let ga = bs.iter().zip(gy.iter()).map(|(x, g)| x * g).collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), ga));
                let gb = as_.iter().zip(gy.iter()).map(|(x, g)| x * g).collect();
                self.accumulate(grads, *b, Tensor::new(gy.shape().to_vec(), gb));
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .iter()
                    .zip(gy.iter())
                    .map(|(s, g)| s * (1.0 - s) * g)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), data));
            }
            Op::Tanh { x } => {
                let data = node
                    .value
                    .iter()
                    .zip(gy.iter())
                    .map(|(t, g)| (1.0 - t * t) * g)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), data));
            }
            Op::Gelu { x } => {
                let data = self
                    .value(*x)
                    .iter()
                    .zip(gy.iter())
                    .map(|(&v, g)| gelu_grad_f32(v) * g)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), data));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xs, gs) = (self.value(*x), self.value(*gain));
                let c = xs.cols();
                let mut gx = Tensor::zeros(xs.shape());
                let mut gg = Tensor::zeros(gs.shape());
                let mut gb = Tensor::zeros(gs.shape());
                for r in 0..xs.rows() {
                    let row = &xs.data()[r * c..(r + 1) * c];
                    let gyr = &gy.data()[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f32>() / c as f32;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut wsum = 0.0f32;
                    let mut wxsum = 0.0f32;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let w = gs.data()[j] * gyr[j];
                        wsum += w;
                        wxsum += w * xhat;
                        gg.data_mut()[j] += gyr[j] * xhat;
                        gb.data_mut()[j] += gyr[j];
                    }
                    let (wmean, wxmean) = (wsum / c as f32, wxsum / c as f32);
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        gx.data_mut()[r * c + j] =
                            (gs.data()[j] * gyr[j] - wmean - xhat * wxmean) * rstd;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, gg);
                self.accumulate(grads, *bias, gb);
            }
            Op::RowSoftmax { x } => {
                let s = &node.value;
                let c = s.cols();
                let mut gx = Tensor::zeros(s.shape());
                for r in 0..s.rows() {
                    let sr = &s.data()[r * c..(r + 1) * c];
                    let gr = &gy.data()[r * c..(r + 1) * c];
                    let dot: f32 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                head_dim,
            } => {
                let qs = self.value(*qkv);
                let (t, hd) = (*tokens, *head_dim);
                let cols_in = 3 * heads * hd;
                let cols_out = heads * hd;
                let inv_s = 1.0 / (hd as f32).sqrt();
                let mut gq = Tensor::zeros(qs.shape());
                let mut da = vec![0.0f32; t * t];
                let mut ds = vec![0.0f32; t * t];
                for i in 0..*batch {
                    for h in 0..*heads {
                        let base = 3 * hd * h;
                        let a = &node.aux[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
                        let at = |tok: usize, col: usize| {
                            qs.data()[(i * t + tok) * cols_in + base + col]
                        };
                        let dy =
                            |tok: usize, d: usize| gy.data()[(i * t + tok) * cols_out + h * hd + d];
                        // dV and dA
                        for u in 0..t {
                            for w in 0..t {
                                let mut acc = 0.0f32;
                                for d in 0..hd {
                                    acc += dy(u, d) * at(w, 2 * hd + d);
                                }
                                da[u * t + w] = acc;
                            }
                        }
                        for w in 0..t {
                            for d in 0..hd {
                                let mut acc = 0.0f32;
                                for u in 0..t {
                                    acc += a[u * t + w] * dy(u, d);
                                }
                                gq.data_mut()[(i * t + w) * cols_in + base + 2 * hd + d] += acc;
                            }
                        }
                        // softmax backward, then the scale factor
                        for u in 0..t {
                            let ar = &a[u * t..(u + 1) * t];
                            let dr = &da[u * t..(u + 1) * t];
                            let dot: f32 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
                            for w in 0..t {
                                ds[u * t + w] = ar[w] * (dr[w] - dot) * inv_s;
                            }
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        for u in 0..t {
                            for d in 0..hd {
                                let mut acc = 0.0f32;
                                for w in 0..t {
                                    acc += ds[u * t + w] * at(w, hd + d);
                                }
                                gq.data_mut()[(i * t + u) * cols_in + base + d] += acc;
                            }
                        }
                        for w in 0..t {
                            for d in 0..hd {
                                let mut acc = 0.0f32;
                                for u in 0..t {
                                    acc += ds[u * t + w] * at(u, d);
                                }
                                gq.data_mut()[(i * t + w) * cols_in + base + hd + d] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, gq);
            }
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).cols();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (j, &r) in rows.iter().enumerate() {
                    for (a, b) in gx.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&gy.data()[j * c..(j + 1) * c])
                    {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start, len } => {
                let xs = self.value(*x);
                let c = xs.cols();
                let mut gx = Tensor::zeros(xs.shape());
                for r in 0..xs.rows() {
                    gx.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let gp = Tensor::new(
                        self.value(p).shape().to_vec(),
                        gy.data()[offset..offset + n].to_vec(),
                    );
                    self.accumulate(grads, p, gp);
                    offset += n;
                }
            }
            Op::IndexScalar { x, row, col } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let c = self.value(*x).cols();
                gx.data_mut()[row * c + col] = gy.scalar_value();
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll { x } => {
                let g = gy.scalar_value();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::CrossEntropy { logits, labels } => {
                let ls = self.value(*logits);
                let c = ls.cols();
                let scale = gy.scalar_value() / labels.len() as f32;
                let mut gl = Tensor::zeros(ls.shape());
                let mut probs = vec![0.0f32; c];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &ls.data()[r * c..(r + 1) * c];
                    softmax_into(row, &mut probs);
                    for j in 0..c {
                        let ind = if j == label { 1.0 } else { 0.0 };
                        gl.data_mut()[r * c + j] = (probs[j] - ind) * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

/// LSTM parameter handles: `w_ih` is [4·hidden × input], `w_hh` is
/// [4·hidden × hidden], `bias` is [4·hidden].
pub struct LstmParams {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub bias: NodeId,
}

fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
pub(crate) const GELU_A: f32 = 0.044_715;

fn gelu_f32(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f32(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng));
        let eye = {
            let mut t = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                t.data_mut()[i * 3 + i] = 1.0;
            }
            t
        };
        let i3 = tape.input(eye);
        let y = tape.matmul_nn(i3, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_of_zeros_is_uniform_and_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2]));
        let s = tape.row_softmax(x);
        assert_close(tape.value(s).data(), &[0.5, 0.5], 1e-7);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = tape.input(Tensor::uniform(&[8, 7], -80.0, 80.0, &mut rng));
        let sb = tape.row_softmax(big);
        for r in 0..8 {
            let sum: f32 = tape.value(sb).data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(tape.value(sb).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::full(&[4, 10], 0.37));
        let loss = tape.cross_entropy(logits, &[0, 3, 5, 9]).unwrap();
        assert!((tape.value(loss).scalar_value() - (10.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn slice_backward_scatters_into_leading_region() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", Tensor::new(vec![3, 4], (0..12).map(|x| x as f32).collect()));
        let s = tape.slice_lead(w, &[2, 3]).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        let expected = [
            1.0, 1.0, 1.0, 0.0, //
            1.0, 1.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(gw.data(), expected);
    }

    #[test]
    fn grad_of_linear_sum_is_input_broadcast() {
        // loss = sum(W x) → ∂loss/∂W[i,j] = x[j]
        let mut tape = Tape::new();
        let w = tape.leaf("w", Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.2]));
        let x = tape.input(Tensor::new(vec![1, 3], vec![3.0, 5.0, 7.0]));
        let y = tape.matmul_nt(x, w).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.get(w).unwrap().data(), &[3.0, 5.0, 7.0, 3.0, 5.0, 7.0], 1e-6);
    }

    #[test]
    fn attention_matches_composed_primitive_ops() {
        let (batch, tokens, heads, hd) = (2usize, 4usize, 2usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qkv_val = Tensor::uniform(&[batch * tokens, 3 * heads * hd], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let qkv = tape.leaf("qkv", qkv_val.clone());
        let fused = tape.attention(qkv, batch, tokens, heads, hd).unwrap();
        let loss = tape.sum_all(fused);
        let fused_grads = tape.backward(loss).unwrap();

        let mut ref_tape = Tape::new();
        let qkv2 = ref_tape.leaf("qkv", qkv_val);
        let mut imgs = Vec::new();
        for i in 0..batch {
            let rows: Vec<usize> = (i * tokens..(i + 1) * tokens).collect();
            let per_img = ref_tape.gather_rows(qkv2, &rows).unwrap();
            let mut head_outs = Vec::new();
            for h in 0..heads {
                let q = ref_tape.slice_cols(per_img, 3 * hd * h, hd).unwrap();
                let k = ref_tape.slice_cols(per_img, 3 * hd * h + hd, hd).unwrap();
                let v = ref_tape.slice_cols(per_img, 3 * hd * h + 2 * hd, hd).unwrap();
                let scores = ref_tape.matmul_nt(q, k).unwrap();
                let scaled = ref_tape.scale(scores, 1.0 / (hd as f32).sqrt());
                let probs = ref_tape.row_softmax(scaled);
                head_outs.push(ref_tape.matmul_nn(probs, v).unwrap());
            }
            // glue head columns back together via transposed row-concat
            let mut row_nodes = Vec::new();
            for t in 0..tokens {
                let mut cols = Vec::new();
                for &ho in &head_outs {
                    cols.push(ref_tape.gather_rows(ho, &[t]).unwrap());
                }
                let row = ref_tape.concat_rows(&cols).unwrap();
                row_nodes.push(row);
            }
            imgs.push(row_nodes);
        }
        // compare values per (image, token, head, dim)
        let fused_val = tape.value(fused);
        for (i, rows) in imgs.iter().enumerate() {
            for (t, &row) in rows.iter().enumerate() {
                let got = ref_tape.value(row);
                for h in 0..heads {
                    for d in 0..hd {
                        let a = fused_val.data()[(i * tokens + t) * heads * hd + h * hd + d];
                        let b = got.data()[h * hd + d];
                        assert!((a - b).abs() < 1e-5, "mismatch at i{i} t{t} h{h} d{d}");
                    }
                }
            }
        }
        // compare gradients through both formulations
        let mut total = None;
        for rows in &imgs {
            for &row in rows {
                let s = ref_tape.sum_all(row);
                total = Some(match total {
                    None => s,
                    Some(acc) => ref_tape.add(acc, s).unwrap(),
                });
            }
        }
        let ref_grads = ref_tape.backward(total.unwrap()).unwrap();
        let ga = fused_grads.get(qkv).unwrap();
        let gb = ref_grads.get(qkv2).unwrap();
        assert_close(ga.data(), gb.data(), 1e-4);
    }

    #[test]
    fn attention_probability_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let qkv = tape.input(Tensor::uniform(&[2 * 5, 3 * 2 * 4], -2.0, 2.0, &mut rng));
        let out = tape.attention(qkv, 2, 5, 2, 4).unwrap();
        let probs = tape.attention_probs(out);
        for row in probs.chunks(5) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_cell_matches_scalar_reference() {
        // hidden = 1 collapses every gate to scalar arithmetic
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![0.5, -0.3]));
        let h0 = tape.input(Tensor::zeros(&[1, 1]));
        let c0 = tape.input(Tensor::new(vec![1, 1], vec![0.2]));
        let w_ih = tape.leaf("w_ih", Tensor::new(vec![4, 2], vec![
            0.1, 0.2, // i
            0.3, -0.1, // f
            0.4, 0.5, // g
            -0.2, 0.3, // o
        ]));
        let w_hh = tape.leaf("w_hh", Tensor::new(vec![4, 1], vec![0.7, -0.6, 0.5, 0.4]));
        let bias = tape.leaf("b", Tensor::new(vec![4], vec![0.01, 0.02, 0.03, 0.04]));
        let params = LstmParams { w_ih, w_hh, bias };
        let (h1, c1) = tape.lstm_cell(x, h0, c0, &params, 1).unwrap();

        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.1 * 0.5 + 0.2 * -0.3 + 0.01);
        let f = sig(0.3 * 0.5 + -0.1 * -0.3 + 0.02);
        let g = (0.4 * 0.5 + 0.5 * -0.3 + 0.03f32).tanh();
        let o = sig(-0.2 * 0.5 + 0.3 * -0.3 + 0.04);
        let c_ref = f * 0.2 + i * g;
        let h_ref = o * c_ref.tanh();
        assert!((tape.value(c1).scalar_value() - c_ref).abs() < 1e-6);
        assert!((tape.value(h1).scalar_value() - h_ref).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[4, 5]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn mac_counter_counts_matmuls_and_attention() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[4, 6]));
        let w = tape.input(Tensor::zeros(&[5, 6]));
        tape.matmul_nt(x, w).unwrap();
        assert_eq!(tape.macs(), 4 * 6 * 5);
        let qkv = tape.input(Tensor::zeros(&[3 * 2, 3 * 1 * 4]));
        tape.attention(qkv, 3, 2, 1, 4).unwrap();
        assert_eq!(tape.macs(), 4 * 6 * 5 + 2 * 3 * 2 * 2 * 4);
    }

    #[test]
    fn forward_values_are_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let x = tape.input(Tensor::trunc_normal(&[6, 8], 1.0, &mut rng));
            let w = tape.input(Tensor::trunc_normal(&[4, 8], 0.5, &mut rng));
            let y = tape.matmul_nt(x, w).unwrap();
            let g = tape.gelu(y);
            let l = tape.sum_all(g);
            tape.value(l).scalar_value().to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn scale_by_scalar_node_routes_gradients_to_both_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", Tensor::new(vec![1, 2], vec![2.0, 3.0]));
        let s = tape.leaf("s", Tensor::scalar(4.0));
        let y = tape.scale_by(x, s).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.get(x).unwrap().data(), &[4.0, 4.0], 1e-6);
        assert_close(grads.get(s).unwrap().data(), &[5.0], 1e-6);
    }
}
