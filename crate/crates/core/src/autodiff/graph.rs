//! The tape: eager forward evaluation with recorded operations, and a
//! single reverse sweep for gradients.
//!
//! Nodes are appended in topological order by construction; `backward`
//! walks them once in reverse with a fixed accumulation order, so gradients
//! are bit-reproducible for a given graph. A tape is consumed by its
//! backward pass.

use std::sync::Arc;

use crate::autodiff::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Boolean mask with the same row-major layout as the tensor it gates.
#[derive(Debug, Clone)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Mask {
        assert_eq!(rows * cols, keep.len());
        Mask {
            rows,
            cols,
            keep: Arc::new(keep),
        }
    }

    pub fn all_true(rows: usize, cols: usize) -> Mask {
        Mask::new(rows, cols, vec![true; rows * cols])
    }

    fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear,
    LinearBias,
    BmmNT { groups: usize, m: usize, k: usize, n: usize },
    BmmNN { groups: usize, m: usize, k: usize, n: usize },
    Add,
    Mul,
    ScaleRows,
    ScalarMul(f64),
    ScalarAdd,
    Tanh,
    MaxScalar(f64),
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Recip,
    Sum,
    Mean,
    RowSum,
    DotConst(Arc<Vec<f64>>),
    MaskedSoftmax(Mask),
    MaskedLogSoftmax(Mask),
    GatherIdx(Arc<Vec<usize>>),
    GatherRows(Arc<Vec<usize>>),
    ConcatCols,
    ConcatRows,
    SplitHeads { batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { batch: usize, seq: usize, heads: usize, head_dim: usize },
    LayerNorm { eps: f64 },
    ColSlice(usize),
    ColsRange { from: usize, to: usize },
    ScaleColBlocks { blocks: usize },
    /// Forward-computed 0/1 keep pattern (routing); gradient flows through
    /// kept entries only.
    KeepMask(Arc<Vec<bool>>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Whether any trainable leaf feeds this node; backward skips inputs
    /// that do not.
    wants_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradient buffers produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

fn shape_err(op: &'static str, detail: String) -> CoreError {
    CoreError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Graph {
        crate::tune_allocator();
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let wants_grad = inputs.iter().any(|i| self.nodes[i.0].wants_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            wants_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf: gradients flow to it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.nodes[id.0].wants_grad = true;
        id
    }

    /// Registers a constant leaf (inputs, masks, frozen parameters): no
    /// gradient is ever computed for it or for paths that feed only it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// `y = x W^T (+ b)`; `x: (R, d2)`, `W: (d1, d2)`, `b: (d1)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, d2) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[1] != d2 {
            return Err(shape_err(
                "linear",
                format!("x cols {d2} vs W shape {:?}", wv.shape()),
            ));
        }
        let d1 = wv.shape()[0];
        let mut out = vec![0.0; r * d1];
        gemm_nt(r, d2, d1, xv.data(), wv.data(), 0.0, &mut out);
        if let Some(bid) = b {
            let bv = self.value(bid);
            if bv.len() != d1 {
                return Err(shape_err("linear", format!("bias len {} vs {d1}", bv.len())));
            }
            let bd = bv.data();
            for row in out.chunks_exact_mut(d1) {
                for (o, bi) in row.iter_mut().zip(bd) {
                    *o += bi;
                }
            }
            Ok(self.push(Op::LinearBias, vec![x, w, bid], Tensor::new(vec![r, d1], out)))
        } else {
            Ok(self.push(Op::Linear, vec![x, w], Tensor::new(vec![r, d1], out)))
        }
    }

    /// Grouped `c_g = a_g b_g^T`; `a: (groups*m, k)`, `b: (groups*n, k)`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId, groups: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        if bv.cols() != k || av.rows() % groups != 0 || bv.rows() % groups != 0 {
            return Err(shape_err(
                "bmm_nt",
                format!("a {:?} b {:?} groups {groups}", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows() / groups;
        let n = bv.rows() / groups;
        let mut out = vec![0.0; groups * m * n];
        for gidx in 0..groups {
            gemm_nt(
                m,
                k,
                n,
                &av.data()[gidx * m * k..(gidx + 1) * m * k],
                &bv.data()[gidx * n * k..(gidx + 1) * n * k],
                0.0,
                &mut out[gidx * m * n..(gidx + 1) * m * n],
            );
        }
        Ok(self.push(
            Op::BmmNT { groups, m, k, n },
            vec![a, b],
            Tensor::new(vec![groups * m, n], out),
        ))
    }

    /// Grouped `c_g = a_g b_g`; `a: (groups*m, k)`, `b: (groups*k, n)`.
    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId, groups: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        let n = bv.cols();
        if av.rows() % groups != 0 || bv.rows() != groups * k {
            return Err(shape_err(
                "bmm_nn",
                format!("a {:?} b {:?} groups {groups}", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows() / groups;
        let mut out = vec![0.0; groups * m * n];
        for gidx in 0..groups {
            gemm_nn(
                m,
                k,
                n,
                &av.data()[gidx * m * k..(gidx + 1) * m * k],
                &bv.data()[gidx * k * n..(gidx + 1) * k * n],
                0.0,
                &mut out[gidx * m * n..(gidx + 1) * m * n],
            );
        }
        Ok(self.push(
            Op::BmmNN { groups, m, k, n },
            vec![a, b],
            Tensor::new(vec![groups * m, n], out),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add, vec![a, b], Tensor::new(shape, out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul, vec![a, b], Tensor::new(shape, out)))
    }

    /// `y_r = s_r * x_r` for row vectors `x_r`; `s` has one entry per row.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, d) = (xv.rows(), xv.cols());
        if sv.len() != r {
            return Err(shape_err(
                "scale_rows",
                format!("{} scalars for {r} rows", sv.len()),
            ));
        }
        let mut out = vec![0.0; r * d];
        for (row, (chunk, scale)) in out
            .chunks_exact_mut(d)
            .zip(sv.data())
            .enumerate()
            .map(|(i, p)| (i, p))
        {
            let src = &xv.data()[row * d..(row + 1) * d];
            for (o, v) in chunk.iter_mut().zip(src) {
                *o = scale * v;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Op::ScaleRows, vec![x, s], Tensor::new(shape, out)))
    }

    pub fn scalar_mul(&mut self, c: f64, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::ScalarMul(c), vec![x], value)
    }

    pub fn scalar_add(&mut self, c: f64, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| c + v);
        self.push(Op::ScalarAdd, vec![x], value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh, vec![x], value)
    }

    /// `y = max(x, c)` elementwise; gradient passes where `x > c`.
    pub fn max_scalar(&mut self, c: f64, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(c));
        self.push(Op::MaxScalar(c), vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus, vec![x], value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp, vec![x], value)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log, vec![x], value)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::recip);
        self.push(Op::Recip, vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let total: f64 = v.data().iter().sum();
        let len = v.len() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(total / len))
    }

    /// Per-row sum: `(R, n) -> (R)`.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        let out: Vec<f64> = v.data().chunks_exact(n).map(|row| row.iter().sum()).collect();
        self.push(Op::RowSum, vec![x], Tensor::new(vec![r], out))
    }

    /// `y = sum_i w_i x_i` with constant weights; the REINFORCE loss head.
    pub fn dot_const(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if self.value(x).len() != weights.len() {
            return Err(shape_err(
                "dot_const",
                format!("{} weights for {} entries", weights.len(), self.value(x).len()),
            ));
        }
        let total = dot(self.value(x).data(), &weights);
        Ok(self.push(
            Op::DotConst(Arc::new(weights)),
            vec![x],
            Tensor::scalar(total),
        ))
    }

    /// Row-stabilized softmax that assigns exactly zero to masked entries.
    /// A row with no unmasked entry is an error.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        if mask.rows != r || mask.cols != n {
            return Err(shape_err(
                "masked_softmax",
                format!("mask {}x{} on {r}x{n}", mask.rows, mask.cols),
            ));
        }
        let mut out = vec![0.0; r * n];
        for row in 0..r {
            let xs = &v.data()[row * n..(row + 1) * n];
            let keep = mask.row(row);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if keep[j] && xs[j] > max {
                    max = xs[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(CoreError::AllMasked { row });
            }
            let dst = &mut out[row * n..(row + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep[j] {
                    let e = (xs[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for (j, o) in dst.iter_mut().enumerate() {
                if keep[j] {
                    *o /= total;
                }
            }
        }
        Ok(self.push(
            Op::MaskedSoftmax(mask.clone()),
            vec![x],
            Tensor::new(vec![r, n], out),
        ))
    }

    /// Log-probabilities over unmasked entries; masked entries read `-inf`
    /// and carry no gradient.
    pub fn masked_log_softmax(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        if mask.rows != r || mask.cols != n {
            return Err(shape_err(
                "masked_log_softmax",
                format!("mask {}x{} on {r}x{n}", mask.rows, mask.cols),
            ));
        }
        let mut out = vec![f64::NEG_INFINITY; r * n];
        for row in 0..r {
            let xs = &v.data()[row * n..(row + 1) * n];
            let keep = mask.row(row);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if keep[j] && xs[j] > max {
                    max = xs[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(CoreError::AllMasked { row });
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep[j] {
                    total += (xs[j] - max).exp();
                }
            }
            let log_z = max + total.ln();
            let dst = &mut out[row * n..(row + 1) * n];
            for j in 0..n {
                if keep[j] {
                    dst[j] = xs[j] - log_z;
                }
            }
        }
        Ok(self.push(
            Op::MaskedLogSoftmax(mask.clone()),
            vec![x],
            Tensor::new(vec![r, n], out),
        ))
    }

    /// `y_r = x[r, idx_r]`.
    pub fn gather_idx(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        if idx.len() != r || idx.iter().any(|&j| j >= n) {
            return Err(shape_err("gather_idx", format!("{} indices for {r} rows", idx.len())));
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(row, &j)| v.data()[row * n + j])
            .collect();
        Ok(self.push(
            Op::GatherIdx(Arc::new(idx)),
            vec![x],
            Tensor::new(vec![r], out),
        ))
    }

    /// `y_r = x[idx_r, :]`; duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let (t, d) = (v.rows(), v.cols());
        if idx.iter().any(|&i| i >= t) {
            return Err(shape_err("gather_rows", "index out of range".into()));
        }
        let mut out = vec![0.0; idx.len() * d];
        for (row, &src) in idx.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&v.data()[src * d..(src + 1) * d]);
        }
        let rows = idx.len();
        Ok(self.push(
            Op::GatherRows(Arc::new(idx)),
            vec![x],
            Tensor::new(vec![rows, d], out),
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let r = av.rows();
        if bv.rows() != r {
            return Err(shape_err(
                "concat_cols",
                format!("{} vs {} rows", r, bv.rows()),
            ));
        }
        let (da, db) = (av.cols(), bv.cols());
        let mut out = vec![0.0; r * (da + db)];
        for row in 0..r {
            out[row * (da + db)..row * (da + db) + da]
                .copy_from_slice(&av.data()[row * da..(row + 1) * da]);
            out[row * (da + db) + da..(row + 1) * (da + db)]
                .copy_from_slice(&bv.data()[row * db..(row + 1) * db]);
        }
        Ok(self.push(
            Op::ConcatCols,
            vec![a, b],
            Tensor::new(vec![r, da + db], out),
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        if bv.cols() != d {
            return Err(shape_err(
                "concat_rows",
                format!("{} vs {} cols", d, bv.cols()),
            ));
        }
        let rows = av.rows() + bv.rows();
        let mut out = Vec::with_capacity(rows * d);
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        Ok(self.push(Op::ConcatRows, vec![a, b], Tensor::new(vec![rows, d], out)))
    }

    /// `(batch*seq, heads*head_dim) -> (batch*heads*seq, head_dim)`.
    pub fn split_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let v = self.value(x);
        if v.rows() != batch * seq || v.cols() % heads != 0 {
            return Err(shape_err(
                "split_heads",
                format!("{:?} with batch {batch} seq {seq} heads {heads}", v.shape()),
            ));
        }
        let head_dim = v.cols() / heads;
        let mut out = vec![0.0; v.len()];
        let d = v.cols();
        for b in 0..batch {
            for t in 0..seq {
                let src = &v.data()[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let dst_row = (b * heads + h) * seq + t;
                    out[dst_row * head_dim..(dst_row + 1) * head_dim]
                        .copy_from_slice(&src[h * head_dim..(h + 1) * head_dim]);
                }
            }
        }
        Ok(self.push(
            Op::SplitHeads { batch, seq, heads, head_dim },
            vec![x],
            Tensor::new(vec![batch * heads * seq, head_dim], out),
        ))
    }

    /// Inverse of [`split_heads`].
    ///
    /// [`split_heads`]: Graph::split_heads
    pub fn merge_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let v = self.value(x);
        if v.rows() != batch * heads * seq {
            return Err(shape_err(
                "merge_heads",
                format!("{:?} with batch {batch} seq {seq} heads {heads}", v.shape()),
            ));
        }
        let head_dim = v.cols();
        let d = heads * head_dim;
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src_row = (b * heads + h) * seq + t;
                    let dst_row = b * seq + t;
                    out[dst_row * d + h * head_dim..dst_row * d + (h + 1) * head_dim]
                        .copy_from_slice(
                            &v.data()[src_row * head_dim..(src_row + 1) * head_dim],
                        );
                }
            }
        }
        Ok(self.push(
            Op::MergeHeads { batch, seq, heads, head_dim },
            vec![x],
            Tensor::new(vec![batch * seq, d], out),
        ))
    }

    /// Per-row normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-6;
        let v = self.value(x);
        let (r, d) = (v.rows(), v.cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", "scale/shift length mismatch".into()));
        }
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![0.0; r * d];
        for row in 0..r {
            let xs = &v.data()[row * d..(row + 1) * d];
            let mu = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            let dst = &mut out[row * d..(row + 1) * d];
            for j in 0..d {
                dst[j] = gd[j] * (xs[j] - mu) * inv + bd[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { eps: EPS },
            vec![x, gamma, beta],
            Tensor::new(vec![r, d], out),
        ))
    }

    /// `y_r = x[r, col]`.
    pub fn col_slice(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        if col >= n {
            return Err(shape_err("col_slice", format!("col {col} of {n}")));
        }
        let out: Vec<f64> = (0..r).map(|row| v.data()[row * n + col]).collect();
        Ok(self.push(Op::ColSlice(col), vec![x], Tensor::new(vec![r], out)))
    }

    /// Columns `[from, to)` of a matrix: `(R, n) -> (R, to - from)`.
    pub fn cols_range(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (r, n) = (v.rows(), v.cols());
        if from >= to || to > n {
            return Err(shape_err("cols_range", format!("[{from}, {to}) of {n}")));
        }
        let w = to - from;
        let mut out = vec![0.0; r * w];
        for row in 0..r {
            out[row * w..(row + 1) * w]
                .copy_from_slice(&v.data()[row * n + from..row * n + to]);
        }
        Ok(self.push(
            Op::ColsRange { from, to },
            vec![x],
            Tensor::new(vec![r, w], out),
        ))
    }

    /// Scales column block `b` of each row by `s[row, b]`; `x` is
    /// `(R, blocks * w)`, `s` is `(R, blocks)`.
    pub fn scale_col_blocks(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let sv = self.value(s);
        let (r, n) = (xv.rows(), xv.cols());
        let blocks = sv.cols();
        if sv.rows() != r || blocks == 0 || n % blocks != 0 {
            return Err(shape_err(
                "scale_col_blocks",
                format!("x {:?} s {:?}", xv.shape(), sv.shape()),
            ));
        }
        let w = n / blocks;
        let mut out = vec![0.0; r * n];
        for row in 0..r {
            for b in 0..blocks {
                let scale = sv.data()[row * blocks + b];
                let off = row * n + b * w;
                for j in 0..w {
                    out[off + j] = scale * xv.data()[off + j];
                }
            }
        }
        Ok(self.push(
            Op::ScaleColBlocks { blocks },
            vec![x, s],
            Tensor::new(vec![r, n], out),
        ))
    }

    /// Zeroes entries according to a forward-computed keep pattern; the
    /// pattern is treated as constant under differentiation.
    pub fn keep_mask(&mut self, x: NodeId, keep: Vec<bool>) -> Result<NodeId> {
        let v = self.value(x);
        if keep.len() != v.len() {
            return Err(shape_err("keep_mask", "pattern length mismatch".into()));
        }
        let out: Vec<f64> = v
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, k)| if *k { *v } else { 0.0 })
            .collect();
        let shape = v.shape().to_vec();
        Ok(self.push(Op::KeepMask(Arc::new(keep)), vec![x], Tensor::new(shape, out)))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// is an error.
    ///
    /// Saved activations and intermediate gradient buffers are released as
    /// the sweep passes them; the result retains gradients for trainable
    /// leaves only.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(CoreError::Backward(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(CoreError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let shapes: Vec<Vec<usize>> =
            self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if let Some(g) = grads[id].take() {
                self.propagate(id, &g, &mut grads)?;
                if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].wants_grad {
                    grads[id] = Some(g);
                }
            }
            // Every consumer of this node has already propagated; its
            // activation is dead weight from here on.
            self.nodes[id].value = Tensor::zeros(vec![0]);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|data| Tensor::new(shapes[i].clone(), data)))
                .collect(),
        })
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].wants_grad
    }

    fn propagate(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        if !node.wants_grad {
            return Ok(());
        }
        let inputs = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Linear | Op::LinearBias => {
                let xv = self.value(inputs[0]).clone();
                let wv = self.value(inputs[1]).clone();
                let (r, d2) = (xv.rows(), xv.cols());
                let d1 = wv.shape()[0];
                if self.wants(inputs[0]) {
                    let dx = Self::grad_buf(grads, inputs[0], r * d2);
                    gemm_nn(r, d1, d2, g, wv.data(), 1.0, dx);
                }
                if self.wants(inputs[1]) {
                    let dw = Self::grad_buf(grads, inputs[1], d1 * d2);
                    gemm_tn(d1, r, d2, g, xv.data(), 1.0, dw);
                }
                if matches!(node.op, Op::LinearBias) && self.wants(inputs[2]) {
                    let db = Self::grad_buf(grads, inputs[2], d1);
                    for row in g.chunks_exact(d1) {
                        for (acc, gi) in db.iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::BmmNT { groups, m, k, n } => {
                let av = self.value(inputs[0]).clone();
                let bv = self.value(inputs[1]).clone();
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                if self.wants(inputs[0]) {
                    let da = Self::grad_buf(grads, inputs[0], groups * m * k);
                    for gi in 0..groups {
                        gemm_nn(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bv.data()[gi * n * k..(gi + 1) * n * k],
                            1.0,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                }
                if self.wants(inputs[1]) {
                    let db = Self::grad_buf(grads, inputs[1], groups * n * k);
                    for gi in 0..groups {
                        gemm_tn(
                            n,
                            m,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &av.data()[gi * m * k..(gi + 1) * m * k],
                            1.0,
                            &mut db[gi * n * k..(gi + 1) * n * k],
                        );
                    }
                }
            }
            Op::BmmNN { groups, m, k, n } => {
                let av = self.value(inputs[0]).clone();
                let bv = self.value(inputs[1]).clone();
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                if self.wants(inputs[0]) {
                    let da = Self::grad_buf(grads, inputs[0], groups * m * k);
                    for gi in 0..groups {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bv.data()[gi * k * n..(gi + 1) * k * n],
                            1.0,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                }
                if self.wants(inputs[1]) {
                    let db = Self::grad_buf(grads, inputs[1], groups * k * n);
                    for gi in 0..groups {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &av.data()[gi * m * k..(gi + 1) * m * k],
                            &g[gi * m * n..(gi + 1) * m * n],
                            1.0,
                            &mut db[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add => {
                for input in inputs {
                    if !self.wants(*input) {
                        continue;
                    }
                    let d = Self::grad_buf(grads, *input, g.len());
                    for (acc, gi) in d.iter_mut().zip(g) {
                        *acc += gi;
                    }
                }
            }
            Op::Mul => {
                let av = self.value(inputs[0]).clone();
                let bv = self.value(inputs[1]).clone();
                if self.wants(inputs[0]) {
                    let da = Self::grad_buf(grads, inputs[0], g.len());
                    for ((acc, gi), bi) in da.iter_mut().zip(g).zip(bv.data()) {
                        *acc += gi * bi;
                    }
                }
                if self.wants(inputs[1]) {
                    let db = Self::grad_buf(grads, inputs[1], g.len());
                    for ((acc, gi), ai) in db.iter_mut().zip(g).zip(av.data()) {
                        *acc += gi * ai;
                    }
                }
            }
            Op::ScaleRows => {
                let xv = self.value(inputs[0]).clone();
                let sv = self.value(inputs[1]).clone();
                let (r, d) = (xv.rows(), xv.cols());
                if self.wants(inputs[0]) {
                    let dx = Self::grad_buf(grads, inputs[0], r * d);
                    for row in 0..r {
                        let s = sv.data()[row];
                        for j in 0..d {
                            dx[row * d + j] += s * g[row * d + j];
                        }
                    }
                }
                if self.wants(inputs[1]) {
                    let ds = Self::grad_buf(grads, inputs[1], r);
                    for row in 0..r {
                        ds[row] += dot(&g[row * d..(row + 1) * d], &xv.data()[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::ScalarMul(c) => {
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for (acc, gi) in dx.iter_mut().zip(g) {
                    *acc += c * gi;
                }
            }
            Op::ScalarAdd => {
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for (acc, gi) in dx.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            Op::Tanh => {
                let y = node.value.clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *acc += gi * (1.0 - yi * yi);
                }
            }
            Op::MaxScalar(c) => {
                let xv = self.value(inputs[0]).clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    if *xi > *c {
                        *acc += gi;
                    }
                }
            }
            Op::Sigmoid => {
                let y = node.value.clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *acc += gi * yi * (1.0 - yi);
                }
            }
            Op::Softplus => {
                let xv = self.value(inputs[0]).clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *acc += gi * sigmoid(*xi);
                }
            }
            Op::Exp => {
                let y = node.value.clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *acc += gi * yi;
                }
            }
            Op::Log => {
                let xv = self.value(inputs[0]).clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *acc += gi / xi;
                }
            }
            Op::Recip => {
                let y = node.value.clone();
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *acc -= gi * yi * yi;
                }
            }
            Op::Sum => {
                let len = self.value(inputs[0]).len();
                let dx = Self::grad_buf(grads, inputs[0], len);
                for acc in dx.iter_mut() {
                    *acc += g[0];
                }
            }
            Op::Mean => {
                let len = self.value(inputs[0]).len();
                let dx = Self::grad_buf(grads, inputs[0], len);
                let scale = g[0] / len as f64;
                for acc in dx.iter_mut() {
                    *acc += scale;
                }
            }
            Op::RowSum => {
                let v = self.value(inputs[0]).clone();
                let (r, n) = (v.rows(), v.cols());
                let dx = Self::grad_buf(grads, inputs[0], r * n);
                for row in 0..r {
                    for j in 0..n {
                        dx[row * n + j] += g[row];
                    }
                }
            }
            Op::DotConst(w) => {
                let dx = Self::grad_buf(grads, inputs[0], w.len());
                for (acc, wi) in dx.iter_mut().zip(w.iter()) {
                    *acc += g[0] * wi;
                }
            }
            Op::MaskedSoftmax(mask) => {
                let y = node.value.clone();
                let (r, n) = (mask.rows, mask.cols);
                let dx = Self::grad_buf(grads, inputs[0], r * n);
                for row in 0..r {
                    let keep = mask.row(row);
                    let ys = &y.data()[row * n..(row + 1) * n];
                    let gs = &g[row * n..(row + 1) * n];
                    let inner: f64 = (0..n).filter(|&j| keep[j]).map(|j| gs[j] * ys[j]).sum();
                    for j in 0..n {
                        if keep[j] {
                            dx[row * n + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax(mask) => {
                let y = node.value.clone();
                let (r, n) = (mask.rows, mask.cols);
                let dx = Self::grad_buf(grads, inputs[0], r * n);
                for row in 0..r {
                    let keep = mask.row(row);
                    let ys = &y.data()[row * n..(row + 1) * n];
                    let gs = &g[row * n..(row + 1) * n];
                    let g_total: f64 = (0..n).filter(|&j| keep[j]).map(|j| gs[j]).sum();
                    for j in 0..n {
                        if keep[j] {
                            dx[row * n + j] += gs[j] - ys[j].exp() * g_total;
                        }
                    }
                }
            }
            Op::GatherIdx(idx) => {
                let v = self.value(inputs[0]).clone();
                let n = v.cols();
                let dx = Self::grad_buf(grads, inputs[0], v.len());
                for (row, &j) in idx.iter().enumerate() {
                    dx[row * n + j] += g[row];
                }
            }
            Op::GatherRows(idx) => {
                let v = self.value(inputs[0]).clone();
                let d = v.cols();
                let dx = Self::grad_buf(grads, inputs[0], v.len());
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[row * d + j];
                    }
                }
            }
            Op::ConcatCols => {
                let da_cols = self.value(inputs[0]).cols();
                let db_cols = self.value(inputs[1]).cols();
                let r = self.value(inputs[0]).rows();
                if self.wants(inputs[0]) {
                    let da = Self::grad_buf(grads, inputs[0], r * da_cols);
                    for row in 0..r {
                        for j in 0..da_cols {
                            da[row * da_cols + j] += g[row * (da_cols + db_cols) + j];
                        }
                    }
                }
                if self.wants(inputs[1]) {
                    let db = Self::grad_buf(grads, inputs[1], r * db_cols);
                    for row in 0..r {
                        for j in 0..db_cols {
                            db[row * db_cols + j] += g[row * (da_cols + db_cols) + da_cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows => {
                let a_len = self.value(inputs[0]).len();
                let b_len = self.value(inputs[1]).len();
                if self.wants(inputs[0]) {
                    let da = Self::grad_buf(grads, inputs[0], a_len);
                    for (acc, gi) in da.iter_mut().zip(&g[..a_len]) {
                        *acc += gi;
                    }
                }
                if self.wants(inputs[1]) {
                    let db = Self::grad_buf(grads, inputs[1], b_len);
                    for (acc, gi) in db.iter_mut().zip(&g[a_len..]) {
                        *acc += gi;
                    }
                }
            }
            Op::SplitHeads { batch, seq, heads, head_dim } => {
                let (batch, seq, heads, head_dim) = (*batch, *seq, *heads, *head_dim);
                let d = heads * head_dim;
                let dx = Self::grad_buf(grads, inputs[0], batch * seq * d);
                for b in 0..batch {
                    for h in 0..heads {
                        for t in 0..seq {
                            let src_row = (b * heads + h) * seq + t;
                            for j in 0..head_dim {
                                dx[(b * seq + t) * d + h * head_dim + j] +=
                                    g[src_row * head_dim + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { batch, seq, heads, head_dim } => {
                let (batch, seq, heads, head_dim) = (*batch, *seq, *heads, *head_dim);
                let d = heads * head_dim;
                let dx = Self::grad_buf(grads, inputs[0], batch * heads * seq * head_dim);
                for b in 0..batch {
                    for h in 0..heads {
                        for t in 0..seq {
                            let dst_row = (b * heads + h) * seq + t;
                            for j in 0..head_dim {
                                dx[dst_row * head_dim + j] +=
                                    g[(b * seq + t) * d + h * head_dim + j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let xv = self.value(inputs[0]).clone();
                let gammav = self.value(inputs[1]).clone();
                let (r, d) = (xv.rows(), xv.cols());
                let dim = d as f64;
                // Recompute per-row statistics; cheaper than saving them.
                for row in 0..r {
                    let xs = &xv.data()[row * d..(row + 1) * d];
                    let gs = &g[row * d..(row + 1) * d];
                    let mu = xs.iter().sum::<f64>() / dim;
                    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim;
                    let inv = 1.0 / (var + eps).sqrt();

                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xs[j] - mu) * inv;
                        let dxhat = gs[j] * gammav.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if self.wants(inputs[0]) {
                        let dx = Self::grad_buf(grads, inputs[0], r * d);
                        for j in 0..d {
                            let xhat = (xs[j] - mu) * inv;
                            let dxhat = gs[j] * gammav.data()[j];
                            dx[row * d + j] +=
                                inv * (dxhat - sum_dxhat / dim - xhat * sum_dxhat_xhat / dim);
                        }
                    }
                    if self.wants(inputs[1]) {
                        let dgamma = Self::grad_buf(grads, inputs[1], d);
                        for j in 0..d {
                            let xhat = (xs[j] - mu) * inv;
                            dgamma[j] += gs[j] * xhat;
                        }
                    }
                    if self.wants(inputs[2]) {
                        let dbeta = Self::grad_buf(grads, inputs[2], d);
                        for j in 0..d {
                            dbeta[j] += gs[j];
                        }
                    }
                }
            }
            Op::ColSlice(col) => {
                let v = self.value(inputs[0]).clone();
                let n = v.cols();
                let dx = Self::grad_buf(grads, inputs[0], v.len());
                for (row, gi) in g.iter().enumerate() {
                    dx[row * n + col] += gi;
                }
            }
            Op::ColsRange { from, to } => {
                let v = self.value(inputs[0]).clone();
                let n = v.cols();
                let w = to - from;
                let dx = Self::grad_buf(grads, inputs[0], v.len());
                for row in 0..v.rows() {
                    for j in 0..w {
                        dx[row * n + from + j] += g[row * w + j];
                    }
                }
            }
            Op::ScaleColBlocks { blocks } => {
                let xv = self.value(inputs[0]).clone();
                let sv = self.value(inputs[1]).clone();
                let (r, n) = (xv.rows(), xv.cols());
                let blocks = *blocks;
                let w = n / blocks;
                if self.wants(inputs[0]) {
                    let dx = Self::grad_buf(grads, inputs[0], r * n);
                    for row in 0..r {
                        for b in 0..blocks {
                            let scale = sv.data()[row * blocks + b];
                            let off = row * n + b * w;
                            for j in 0..w {
                                dx[off + j] += scale * g[off + j];
                            }
                        }
                    }
                }
                if self.wants(inputs[1]) {
                    let ds = Self::grad_buf(grads, inputs[1], r * blocks);
                    for row in 0..r {
                        for b in 0..blocks {
                            let off = row * n + b * w;
                            ds[row * blocks + b] +=
                                dot(&g[off..off + w], &xv.data()[off..off + w]);
                        }
                    }
                }
            }
            Op::KeepMask(keep) => {
                let dx = Self::grad_buf(grads, inputs[0], g.len());
                for ((acc, gi), k) in dx.iter_mut().zip(g).zip(keep.iter()) {
                    if *k {
                        *acc += gi;
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Scaled dot-product multi-head attention over grouped rows.
///
/// `q: (batch*tq, d)`, `k`/`v`: `(batch*tk, d)` with `d` divisible by
/// `heads`. The optional mask has one row per query row (`batch*tq` by
/// `tk`) and is shared across heads.
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Mask>,
    batch: usize,
    tq: usize,
    tk: usize,
    heads: usize,
) -> Result<NodeId> {
    let d = g.value(q).cols();
    if d % heads != 0 {
        return Err(shape_err("attention", format!("dim {d} not divisible by {heads} heads")));
    }
    let head_dim = d / heads;
    let qh = g.split_heads(q, batch, tq, heads)?;
    let kh = g.split_heads(k, batch, tk, heads)?;
    let vh = g.split_heads(v, batch, tk, heads)?;
    let scores = g.bmm_nt(qh, kh, batch * heads)?;
    let scaled = g.scalar_mul(1.0 / (head_dim as f64).sqrt(), scores);

    let score_rows = batch * heads * tq;
    let full_mask = match mask {
        Some(m) => {
            if m.rows != batch * tq || m.cols != tk {
                return Err(shape_err(
                    "attention",
                    format!("mask {}x{}, want {}x{}", m.rows, m.cols, batch * tq, tk),
                ));
            }
            let mut keep = vec![true; score_rows * tk];
            for b in 0..batch {
                for h in 0..heads {
                    for t in 0..tq {
                        let dst = ((b * heads + h) * tq + t) * tk;
                        let src = (b * tq + t) * tk;
                        keep[dst..dst + tk].copy_from_slice(&m.keep[src..src + tk]);
                    }
                }
            }
            Mask::new(score_rows, tk, keep)
        }
        None => Mask::all_true(score_rows, tk),
    };
    let probs = g.masked_softmax(scaled, &full_mask)?;
    let mixed = g.bmm_nn(probs, vh, batch * heads)?;
    g.merge_heads(mixed, batch, tq, heads)
}
