use rayon::prelude::*;

use super::element::Element;
use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Ordered record of forward operations. Inputs of every node were pushed
/// earlier, so reverse iteration is a valid backward schedule that visits
/// each operation exactly once. Gradients accumulate additively when a
/// variable feeds several consumers.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E: Element> {
    Source,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    AddRow(Var, Var),
    Scale(Var, E),
    MulScalar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Softmax { input: Var, causal: bool },
    LayerNorm { input: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Relu(Var),
    L2NormalizeRows(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    MultiPositiveCrossEntropy { logits: Var, positives: Vec<Vec<usize>> },
    BceWithLogit { logits: Var, labels: Vec<u8> },
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Source))
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<E> {
        self.nodes[v.0].value.scalar_value()
    }

    /// Gradient buffer of `v` populated by the most recent [`Self::backward`].
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::DetachedVar)
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        value: Tensor<E>,
        requires_grad: bool,
        op: Op<E>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("add", value, req, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("sub", value, req, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_elem",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("mul_elem", value, req, Op::MulElem(a, b))
    }

    /// Broadcast-add a length-`c` row vector onto every row of a `[r×c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (r, c) = self.val(a).as_rows();
        if self.val(row).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.val(a).shape().to_vec(),
                right: self.val(row).shape().to_vec(),
            });
        }
        let mut data = self.val(a).data().to_vec();
        let rowv = self.val(row).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowv[j];
            }
        }
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(row);
        self.finish("add_row", value, req, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let ke = E::from_f64(k);
        let value = self.val(a).map(|x| x * ke);
        let req = self.requires(a);
        self.finish("scale", value, req, Op::Scale(a, ke))
    }

    /// Multiply a tensor by a single-element tensor (broadcast scalar).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        let sv = self.val(s).scalar_value()?;
        let value = self.val(a).map(|x| x * sv);
        let req = self.requires(a) || self.requires(s);
        self.finish("mul_scalar", value, req, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.val(a).map(|x| x.exp());
        let req = self.requires(a);
        self.finish("exp", value, req, Op::Exp(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.val(a).as_rows();
        let (k2, n) = self.val(b).as_rows();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.val(a).shape().to_vec(),
                right: self.val(b).shape().to_vec(),
            });
        }
        let mut out = vec![E::ZERO; m * n];
        mm_nn(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        let value = Tensor::from_rows(m, n, out)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("matmul", value, req, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.val(a).as_rows();
        let src = self.val(a).data();
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_rows(c, r, out)?;
        let req = self.requires(a);
        self.finish("transpose", value, req, Op::Transpose(a))
    }

    /// Select rows by index (embedding lookup / pooling). Duplicate indices
    /// accumulate gradient additively.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.val(a).as_rows();
        for &ix in indices {
            if ix >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    size: r,
                });
            }
        }
        let src = self.val(a).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            out.extend_from_slice(&src[ix * c..(ix + 1) * c]);
        }
        let value = Tensor::from_rows(indices.len(), c, out)?;
        let req = self.requires(a);
        self.finish(
            "gather_rows",
            value,
            req,
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let (_, c) = self.val(parts[0]).as_rows();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.val(p).as_rows();
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.val(parts[0]).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.val(p).data());
        }
        let value = Tensor::from_rows(rows, c, out)?;
        let req = parts.iter().any(|&p| self.requires(p));
        self.finish("concat_rows", value, req, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.val(a).as_rows();
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let src = self.val(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_rows(r, len, out)?;
        let req = self.requires(a);
        self.finish("slice_cols", value, req, Op::SliceCols { input: a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let (r, _) = self.val(parts[0]).as_rows();
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.val(p).as_rows();
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(parts[0]).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
            total_c += pc;
        }
        let mut out = vec![E::ZERO; r * total_c];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.val(p).as_rows();
            let src = self.val(p).data();
            for i in 0..r {
                out[i * total_c + offset..i * total_c + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let value = Tensor::from_rows(r, total_c, out)?;
        let req = parts.iter().any(|&p| self.requires(p));
        self.finish("concat_cols", value, req, Op::ConcatCols(parts.to_vec()))
    }

    // ---- nonlinearities ----

    /// Row-wise softmax over the last axis, computed with max subtraction.
    /// With `causal`, row `i` only sees columns `0..=i`; masked entries are 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.val(a).as_rows();
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let src = self.val(a).data();
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let valid = if causal { (i + 1).min(c) } else { c };
            let row = &src[i * c..i * c + valid];
            let m = row.iter().fold(row[0], |acc, &x| acc.maximum(x));
            let mut sum = E::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..valid {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let value = Tensor::new(self.val(a).shape().to_vec(), out)?;
        let req = self.requires(a);
        self.finish("softmax", value, req, Op::Softmax { input: a, causal })
    }

    /// Row-wise standardization (biased variance) followed by a per-column
    /// affine transform.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(a)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let (r, c) = self.val(a).as_rows();
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.val(a).shape().to_vec(),
                right: self.val(gamma).shape().to_vec(),
            });
        }
        let src = self.val(a).data();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let inv_c = E::from_f64(1.0 / c as f64);
        let epe = E::from_f64(eps);
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<E>() * inv_c;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<E>()
                * inv_c;
            let inv_w = E::ONE / (var + epe).sqrt();
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mean) * inv_w + b[j];
            }
        }
        let value = Tensor::new(self.val(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(gamma) || self.requires(beta);
        self.finish(
            "layer_norm",
            value,
            req,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Tanh-approximation GELU:
    /// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let alpha = E::from_f64(GELU_SCALE);
        let cubic = E::from_f64(GELU_CUBIC);
        let half = E::from_f64(0.5);
        let value = self.val(a).map(|x| {
            let u = alpha * (x + cubic * x * x * x);
            half * x * (E::ONE + u.tanh())
        });
        let req = self.requires(a);
        self.finish("gelu", value, req, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.val(a).map(|x| x.maximum(E::ZERO));
        let req = self.requires(a);
        self.finish("relu", value, req, Op::Relu(a))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.val(a).as_rows();
        let src = self.val(a).data();
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| x * x).sum::<E>().sqrt();
            if norm == E::ZERO {
                return Err(TensorError::InvalidArgument {
                    op: "l2_normalize_rows",
                    message: format!("row {i} has zero norm"),
                });
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(self.val(a).shape().to_vec(), out)?;
        let req = self.requires(a);
        self.finish("l2_normalize_rows", value, req, Op::L2NormalizeRows(a))
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.val(a).data().iter().copied().sum::<E>();
        let req = self.requires(a);
        self.finish("sum_all", Tensor::scalar(s), req, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.val(a).len();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_all" });
        }
        let s = self.val(a).data().iter().copied().sum::<E>() * E::from_f64(1.0 / n as f64);
        let req = self.requires(a);
        self.finish("mean_all", Tensor::scalar(s), req, Op::MeanAll(a))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, fused through
    /// log-sum-exp.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (r, c) = self.val(logits).as_rows();
        if r != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        if c == 0 {
            return Err(TensorError::EmptyAxis {
                op: "cross_entropy_with_logits",
            });
        }
        for &t in targets {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_with_logits",
                    index: t,
                    size: c,
                });
            }
        }
        let src = self.val(logits).data();
        let mut total = E::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total * E::from_f64(1.0 / r as f64);
        let req = self.requires(logits);
        self.finish(
            "cross_entropy_with_logits",
            Tensor::scalar(loss),
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Row-wise cross entropy where every row may have several positive
    /// columns: `mean_rows( lse(row) - mean_{j in P} row[j] )`. Rows with an
    /// empty positive set are skipped.
    pub fn multi_positive_cross_entropy(
        &mut self,
        logits: Var,
        positives: &[Vec<usize>],
    ) -> Result<Var> {
        self.check(logits)?;
        let (r, c) = self.val(logits).as_rows();
        if r != positives.len() {
            return Err(TensorError::ShapeMismatch {
                op: "multi_positive_cross_entropy",
                left: vec![r, c],
                right: vec![positives.len()],
            });
        }
        for set in positives {
            for &j in set {
                if j >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: "multi_positive_cross_entropy",
                        index: j,
                        size: c,
                    });
                }
            }
        }
        let active = positives.iter().filter(|s| !s.is_empty()).count();
        if active == 0 {
            return Err(TensorError::InvalidArgument {
                op: "multi_positive_cross_entropy",
                message: "every positive set is empty".into(),
            });
        }
        let src = self.val(logits).data();
        let mut total = E::ZERO;
        for (i, set) in positives.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            let mut pos = E::ZERO;
            for &j in set {
                pos += row[j];
            }
            total += lse - pos * E::from_f64(1.0 / set.len() as f64);
        }
        let loss = total * E::from_f64(1.0 / active as f64);
        let req = self.requires(logits);
        self.finish(
            "multi_positive_cross_entropy",
            Tensor::scalar(loss),
            req,
            Op::MultiPositiveCrossEntropy {
                logits,
                positives: positives.to_vec(),
            },
        )
    }

    /// Mean over the batch of `-[y·log σ(z) + (1-y)·log(1-σ(z))]`, computed
    /// in log space as `softplus(z) - y·z`.
    pub fn binary_cross_entropy_with_logit(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        self.check(logits)?;
        let n = self.val(logits).len();
        if n != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy_with_logit",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "binary_cross_entropy_with_logit",
            });
        }
        for &y in labels {
            if y > 1 {
                return Err(TensorError::InvalidArgument {
                    op: "binary_cross_entropy_with_logit",
                    message: format!("label {y} is not binary"),
                });
            }
        }
        let src = self.val(logits).data();
        let mut total = E::ZERO;
        for (i, &y) in labels.iter().enumerate() {
            let z = src[i];
            let softplus = z.maximum(E::ZERO) + (-(z.abs())).exp().ln_1p();
            total += softplus - if y == 1 { z } else { E::ZERO };
        }
        let loss = total * E::from_f64(1.0 / n as f64);
        let req = self.requires(logits);
        self.finish(
            "binary_cross_entropy_with_logit",
            Tensor::scalar(loss),
            req,
            Op::BceWithLogit {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// grad-requiring node reachable from `loss`; earlier results are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.value.data()[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }

        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[E], grads: &mut Vec<Option<Vec<E>>>) {
        let nodes = &self.nodes;
        let mut acc = |target: Var, f: &mut dyn FnMut(&mut [E])| {
            if !nodes[target.0].requires_grad {
                return;
            }
            let buf = grads[target.0]
                .get_or_insert_with(|| vec![E::ZERO; nodes[target.0].value.len()]);
            f(buf);
        };

        match &nodes[idx].op {
            Op::Source => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::MulElem(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let (r, c) = nodes[a.0].value.as_rows();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*row, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = nodes[s.0].value.data()[0];
                let av = nodes[a.0].value.data();
                acc(*a, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                });
                acc(*s, &mut |buf| {
                    let mut dot = E::ZERO;
                    for (&gv, &x) in g.iter().zip(av) {
                        dot += gv * x;
                    }
                    buf[0] += dot;
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = nodes[a.0].value.as_rows();
                let (_, n) = nodes[b.0].value.as_rows();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // dA += dC·Bᵀ ; dB += Aᵀ·dC
                acc(*a, &mut |buf| mm_nt(g, bv, m, n, k, buf));
                acc(*b, &mut |buf| mm_tn(av, g, m, k, n, buf));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.as_rows();
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let (_, c) = nodes[a.0].value.as_rows();
                acc(*a, &mut |buf| {
                    for (i, &src_row) in indices.iter().enumerate() {
                        for j in 0..c {
                            buf[src_row * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |buf| add_into(buf, slice));
                    offset += len;
                }
            }
            Op::SliceCols { input, start, len } => {
                let (r, c) = nodes[input.0].value.as_rows();
                let (start, len) = (*start, *len);
                acc(*input, &mut |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total_c: usize = parts
                    .iter()
                    .map(|&p| nodes[p.0].value.as_rows().1)
                    .sum();
                let mut offset = 0;
                for &p in parts {
                    let (r, pc) = nodes[p.0].value.as_rows();
                    acc(p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..pc {
                                buf[i * pc + j] += g[i * total_c + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::Softmax { input, causal } => {
                let (r, c) = nodes[input.0].value.as_rows();
                let y = nodes[idx].value.data();
                let causal = *causal;
                acc(*input, &mut |buf| {
                    for i in 0..r {
                        let valid = if causal { (i + 1).min(c) } else { c };
                        let mut dot = E::ZERO;
                        for j in 0..valid {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..valid {
                            buf[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let (r, c) = nodes[input.0].value.as_rows();
                let x = nodes[input.0].value.data();
                let gm = nodes[gamma.0].value.data();
                let inv_c = E::from_f64(1.0 / c as f64);
                let epe = E::from_f64(*eps);
                // Per-row statistics recomputed from the forward input.
                let mut xhat = vec![E::ZERO; r * c];
                let mut inv_w = vec![E::ZERO; r];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let mean = row.iter().copied().sum::<E>() * inv_c;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<E>()
                        * inv_c;
                    inv_w[i] = E::ONE / (var + epe).sqrt();
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv_w[i];
                    }
                }
                acc(*gamma, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                });
                acc(*input, &mut |buf| {
                    for i in 0..r {
                        let mut mean_dxhat = E::ZERO;
                        let mut mean_dxhat_xhat = E::ZERO;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gm[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * c + j];
                        }
                        mean_dxhat *= inv_c;
                        mean_dxhat_xhat *= inv_c;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gm[j];
                            buf[i * c + j] += (dxh
                                - mean_dxhat
                                - xhat[i * c + j] * mean_dxhat_xhat)
                                * inv_w[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                let alpha = E::from_f64(GELU_SCALE);
                let cubic = E::from_f64(GELU_CUBIC);
                let half = E::from_f64(0.5);
                let three = E::from_f64(3.0);
                acc(*a, &mut |buf| {
                    for (i, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        let xv = x[i];
                        let u = alpha * (xv + cubic * xv * xv * xv);
                        let t = u.tanh();
                        let sech2 = E::ONE - t * t;
                        let du = alpha * (E::ONE + three * cubic * xv * xv);
                        let d = half * (E::ONE + t) + half * xv * sech2 * du;
                        *o += gv * d;
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |buf| {
                    for (i, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        if x[i] > E::ZERO {
                            *o += gv;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let (r, c) = nodes[a.0].value.as_rows();
                let x = nodes[a.0].value.data();
                let y = nodes[idx].value.data();
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        let row_x = &x[i * c..(i + 1) * c];
                        let norm = row_x.iter().map(|&v| v * v).sum::<E>().sqrt();
                        let mut dot = E::ZERO;
                        for j in 0..c {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            buf[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = nodes[idx].value.data();
                acc(*a, &mut |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                acc(*a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.len();
                let g0 = g[0] * E::from_f64(1.0 / n as f64);
                acc(*a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (r, c) = nodes[logits.0].value.as_rows();
                let z = nodes[logits.0].value.data();
                let g0 = g[0] * E::from_f64(1.0 / r as f64);
                acc(*logits, &mut |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &z[i * c..(i + 1) * c];
                        let p = softmax_row(row);
                        for j in 0..c {
                            let indicator = if j == t { E::ONE } else { E::ZERO };
                            buf[i * c + j] += g0 * (p[j] - indicator);
                        }
                    }
                });
            }
            Op::MultiPositiveCrossEntropy { logits, positives } => {
                let (_, c) = nodes[logits.0].value.as_rows();
                let z = nodes[logits.0].value.data();
                let active = positives.iter().filter(|s| !s.is_empty()).count();
                let g0 = g[0] * E::from_f64(1.0 / active as f64);
                acc(*logits, &mut |buf| {
                    for (i, set) in positives.iter().enumerate() {
                        if set.is_empty() {
                            continue;
                        }
                        let row = &z[i * c..(i + 1) * c];
                        let p = softmax_row(row);
                        let w = E::from_f64(1.0 / set.len() as f64);
                        for j in 0..c {
                            buf[i * c + j] += g0 * p[j];
                        }
                        for &j in set {
                            buf[i * c + j] -= g0 * w;
                        }
                    }
                });
            }
            Op::BceWithLogit { logits, labels } => {
                let z = nodes[logits.0].value.data();
                let g0 = g[0] * E::from_f64(1.0 / labels.len() as f64);
                acc(*logits, &mut |buf| {
                    for (i, &y) in labels.iter().enumerate() {
                        let s = sigmoid(z[i]);
                        let yv = if y == 1 { E::ONE } else { E::ZERO };
                        buf[i] += g0 * (s - yv);
                    }
                });
            }
        }
    }
}

fn add_into<E: Element>(out: &mut [E], src: &[E]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let m = row.iter().fold(row[0], |acc, &x| acc.maximum(x));
    let sum: E = row.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

fn softmax_row<E: Element>(row: &[E]) -> Vec<E> {
    let m = row.iter().fold(row[0], |acc, &x| acc.maximum(x));
    let mut out: Vec<E> = row.iter().map(|&x| (x - m).exp()).collect();
    let sum: E = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

fn sigmoid<E: Element>(z: E) -> E {
    if z >= E::ZERO {
        E::ONE / (E::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::ONE + e)
    }
}

// Work threshold below which the row-parallel kernels stay serial; each
// output row is computed by exactly one thread, so results are bitwise
// identical to the serial path.
const PAR_MIN_OPS: usize = 262_144;

/// out[m×n] += a[m×k] · b[k×n]
fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let row = |out_row: &mut [E], a_row: &[E]| {
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_MIN_OPS {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, ar)| row(o, ar));
    } else {
        for i in 0..m {
            row(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k]);
        }
    }
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ  (dot products of contiguous rows)
fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    let row = |out_row: &mut [E], a_row: &[E]| {
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut dot = E::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                dot += x * y;
            }
            *o += dot;
        }
    };
    if m > 1 && m * k * n >= PAR_MIN_OPS {
        out.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(|(o, ar)| row(o, ar));
    } else {
        for i in 0..m {
            row(&mut out[i * k..(i + 1) * k], &a[i * n..(i + 1) * n]);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let row = |kk: usize, out_row: &mut [E]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if k > 1 && m * k * n >= PAR_MIN_OPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, o)| row(kk, o));
    } else {
        for kk in 0..k {
            row(kk, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad_check, SeededRng};

    fn tensor2(r: usize, c: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(r, c, data.to_vec()).unwrap()
    }

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.next_normal() * 0.5).collect()).unwrap()
    }

    /// Run `build` once with gradients for the analytic side, then compare
    /// against central differences.
    fn grad_check_against_fd<F>(build: F, x: &Tensor<f64>, tol: f64)
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true).unwrap();
        let loss = build(&mut tape, v).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(v).unwrap().to_vec();

        let f = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone(), false)?;
            let loss = build(&mut tape, v)?;
            tape.scalar(loss)
        };
        let err = finite_diff_grad_check(f, x, &analytic, 1e-5).unwrap();
        assert!(err < tol, "max rel err {err} exceeds {tol}");
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .constant(tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let m = tape.constant(tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor2(1, 2, &[1.0, 2.0])).unwrap();
        let b = tape.constant(tensor2(2, 1, &[3.0, 4.0])).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![4, 2])).unwrap();
        match tape.matmul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        // random 3×4 · 4×2, backward of sum
        let b = random_tensor(vec![4, 2], 21);
        let x = random_tensor(vec![3, 4], 20);
        grad_check_against_fd(
            |tape, v| {
                let bv = tape.constant(b.clone())?;
                let prod = tape.matmul(v, bv)?;
                tape.sum_all(prod)
            },
            &x,
            1e-6,
        );
        // and with the probe on the right-hand side
        let a = random_tensor(vec![3, 4], 22);
        let y = random_tensor(vec![4, 2], 23);
        grad_check_against_fd(
            |tape, v| {
                let av = tape.constant(a.clone())?;
                let prod = tape.matmul(av, v)?;
                tape.sum_all(prod)
            },
            &y,
            1e-6,
        );
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 2, &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x, false).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(tensor2(1, 2, &[1000.0, 0.0])).unwrap();
        let y = tape.softmax(x, false).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let y = tape.softmax(x, false).unwrap();
        let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 0])).unwrap();
        assert!(matches!(
            tape.softmax(x, false),
            Err(TensorError::EmptyAxis { .. })
        ));
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x = random_tensor(vec![3, 5], 31);
        let w = random_tensor(vec![3, 5], 32);
        grad_check_against_fd(
            |tape, v| {
                let y = tape.softmax(v, false)?;
                let wv = tape.constant(w.clone())?;
                let prod = tape.mul_elem(y, wv)?;
                tape.sum_all(prod)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn causal_softmax_masks_later_columns() {
        let mut tape = Tape::new();
        let x = tape
            .constant(tensor2(3, 3, &[5.0, 9.0, 9.0, 1.0, 1.0, 9.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let y = tape.softmax(x, true).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.5);
        assert_eq!(d[5], 0.0);
        let row2: f64 = d[6..9].iter().sum();
        assert!((row2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 4, &[3.0; 4])).unwrap();
        let g = tape.constant(tensor2(1, 4, &[1.0; 4])).unwrap();
        let b = tape.constant(tensor2(1, 4, &[0.0; 4])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 2, &[1.0, 3.0])).unwrap();
        let g = tape.constant(tensor2(1, 2, &[1.0, 1.0])).unwrap();
        let b = tape.constant(tensor2(1, 2, &[0.0, 0.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let x = random_tensor(vec![4, 8], 41);
        let w = random_tensor(vec![4, 8], 42);
        let gamma = random_tensor(vec![8], 43);
        let beta = random_tensor(vec![8], 44);
        grad_check_against_fd(
            |tape, v| {
                let g = tape.constant(gamma.clone())?;
                let b = tape.constant(beta.clone())?;
                let y = tape.layer_norm(v, g, b, 1e-5)?;
                let wv = tape.constant(w.clone())?;
                let prod = tape.mul_elem(y, wv)?;
                tape.sum_all(prod)
            },
            &x,
            1e-6,
        );
        // gamma and beta sides
        grad_check_against_fd(
            |tape, v| {
                let xv = tape.constant(x.clone())?;
                let b = tape.constant(beta.clone())?;
                let y = tape.layer_norm(xv, v, b, 1e-5)?;
                tape.sum_all(y)
            },
            &gamma,
            1e-6,
        );
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let mut tape = Tape::new();
        let x = tape
            .constant(tensor2(1, 3, &[0.0, 30.0, -30.0]))
            .unwrap();
        let y = tape.gelu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 30.0).abs() < 1e-9);
        assert!(d[2].abs() < 1e-9);
    }

    #[test]
    fn gelu_backward_matches_fd() {
        let x = tensor2(1, 5, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let w = random_tensor(vec![1, 5], 51);
        grad_check_against_fd(
            |tape, v| {
                let y = tape.gelu(v)?;
                let wv = tape.constant(w.clone())?;
                let prod = tape.mul_elem(y, wv)?;
                tape.sum_all(prod)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor2(1, 2, &[0.0, 0.0])).unwrap();
        let l = tape.cross_entropy_with_logits(z, &[0]).unwrap();
        assert!((tape.scalar(l).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let z = tape.constant(tensor2(1, 2, &[10.0, -10.0])).unwrap();
        let l = tape.cross_entropy_with_logits(z, &[0]).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-8);
    }

    #[test]
    fn cross_entropy_equals_per_row_oracle() {
        let z = random_tensor(vec![3, 4], 61);
        let targets = [2usize, 0, 3];
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let l = tape.cross_entropy_with_logits(zv, &targets).unwrap();

        let mut manual = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &z.data()[i * 4..(i + 1) * 4];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[t].exp() / denom;
            manual += -p.ln();
        }
        manual /= 3.0;
        assert!((tape.scalar(l).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor2(1, 2, &[0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.cross_entropy_with_logits(z, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_backward_matches_fd() {
        let z = random_tensor(vec![3, 4], 62);
        grad_check_against_fd(
            |tape, v| tape.cross_entropy_with_logits(v, &[1, 3, 0]),
            &z,
            1e-6,
        );
    }

    #[test]
    fn bce_known_values() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor2(1, 1, &[0.0])).unwrap();
        let l = tape.binary_cross_entropy_with_logit(z, &[1]).unwrap();
        assert!((tape.scalar(l).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let z = tape.constant(tensor2(1, 1, &[20.0])).unwrap();
        let l = tape.binary_cross_entropy_with_logit(z, &[1]).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-8);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [-1.0f64, 2.0];
        let y = [0u8, 1];
        let mut tape = Tape::new();
        let zv = tape.constant(tensor2(1, 2, &z)).unwrap();
        let l = tape.binary_cross_entropy_with_logit(zv, &y).unwrap();
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let manual = (-(1.0 - sigma(z[0])).ln() - sigma(z[1]).ln()) / 2.0;
        assert!((tape.scalar(l).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn bce_backward_matches_fd() {
        let z = random_tensor(vec![1, 6], 63);
        grad_check_against_fd(
            |tape, v| tape.binary_cross_entropy_with_logit(v, &[0, 1, 1, 0, 1, 0]),
            &z,
            1e-6,
        );
    }

    #[test]
    fn multi_positive_ce_backward_matches_fd() {
        let z = random_tensor(vec![2, 5], 64);
        let sets = vec![vec![0usize, 3], vec![2]];
        grad_check_against_fd(
            |tape, v| tape.multi_positive_cross_entropy(v, &sets),
            &z,
            1e-6,
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]).with_grad(), true)
            .unwrap();
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn reuse_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(2, 2, &[0.5; 4]), true).unwrap();
        let doubled = tape.add(x, x).unwrap();
        let s = tape.sum_all(doubled).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(2, 2, &[0.5; 4]), true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn detached_var_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor2(1, 1, &[1.0]), true).unwrap();
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        let mut other = Tape::<f64>::new();
        assert!(matches!(other.backward(s), Err(TensorError::DetachedVar)));
    }

    #[test]
    fn composite_pipeline_grad_check() {
        // softmax-then-cross-entropy style pipeline through several ops
        let x = random_tensor(vec![4, 6], 71);
        let w = random_tensor(vec![6, 3], 72);
        grad_check_against_fd(
            |tape, v| {
                let wv = tape.constant(w.clone())?;
                let h = tape.matmul(v, wv)?;
                let h = tape.gelu(h)?;
                tape.cross_entropy_with_logits(h, &[0, 2, 1, 1])
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn l2_normalize_unit_norm_and_grad() {
        let x = random_tensor(vec![3, 7], 81);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let y = tape.l2_normalize_rows(v).unwrap();
        for i in 0..3 {
            let norm: f64 = tape.value(y).data()[i * 7..(i + 1) * 7]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let w = random_tensor(vec![3, 7], 82);
        grad_check_against_fd(
            |tape, v| {
                let y = tape.l2_normalize_rows(v)?;
                let wv = tape.constant(w.clone())?;
                let p = tape.mul_elem(y, wv)?;
                tape.sum_all(p)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn structural_ops_grad_check() {
        let x = random_tensor(vec![4, 6], 91);
        let w = random_tensor(vec![2, 3], 92);
        grad_check_against_fd(
            |tape, v| {
                let t = tape.transpose(v)?; // 6×4
                let s = tape.slice_cols(t, 1, 3)?; // 6×3
                let g = tape.gather_rows(s, &[0, 2])?; // 2×3
                let wv = tape.constant(w.clone())?;
                let p = tape.mul_elem(g, wv)?;
                tape.sum_all(p)
            },
            &x,
            1e-6,
        );
        // concat + slice + scalar ops
        let w2 = random_tensor(vec![4, 12], 93);
        grad_check_against_fd(
            |tape, v| {
                let c = tape.concat_cols(&[v, v])?; // 4×12
                let s = tape.constant(Tensor::scalar(0.7))?;
                let e = tape.mul_scalar(c, s)?;
                let wv = tape.constant(w2.clone())?;
                let p = tape.mul_elem(e, wv)?;
                tape.mean_all(p)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn mul_scalar_var_grad_check() {
        let s = Tensor::scalar(1.3);
        let a = random_tensor(vec![2, 3], 94);
        let w = random_tensor(vec![2, 3], 95);
        grad_check_against_fd(
            |tape, v| {
                let av = tape.constant(a.clone())?;
                let e = tape.exp(v)?;
                let scaled = tape.mul_scalar(av, e)?;
                let wv = tape.constant(w.clone())?;
                let p = tape.mul_elem(scaled, wv)?;
                tape.sum_all(p)
            },
            &s,
            1e-6,
        );
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 1, &[1e308])).unwrap();
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(TensorError::NonFinite { .. })));
        assert!(tape
            .leaf(tensor2(1, 1, &[f64::NAN]), false)
            .is_err());
    }

    #[test]
    fn same_seed_same_op_sequence_is_bitwise_identical() {
        let run = || {
            let x = random_tensor(vec![8, 8], 123);
            let w = random_tensor(vec![8, 8], 124);
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x, true).unwrap();
            let wv = tape.constant(w).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h).unwrap();
            let s = tape.softmax(h, false).unwrap();
            let l = tape.mean_all(s).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(xv).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v1), bits(&v2));
        assert_eq!(bits(&g1), bits(&g2));
    }
}
