//! Define-by-run computation record.
//!
//! Every operation pushes one node holding the forward value, the parent ids
//! and a backward rule. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep that visits each node once.

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

/// Gradient table produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape when the node
    /// was not reached by the backward sweep.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            parents: vec![],
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable input; `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            parents: vec![],
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of `a`'s value with the gradient path cut.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.leaf(v)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        backward: BackwardFn,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Some(backward)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(
            "add",
            a,
            b,
            |x, y| x + y,
            Box::new(|g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            Box::new(|g| {
                let neg = scale_data(g, -1.0);
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            Box::new(move |g| {
                let da = hadamard(g, &vb);
                let db = hadamard(g, &va);
                vec![da, db]
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = scale_data(self.value(a), c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![scale_data(g, c)])),
        )
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a).clone();
        if va.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let data = va.data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, xi)| gi / xi)
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), data).expect("log backward shape")]
            })),
        ))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let saved = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![hadamard(g, &saved)])),
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |g| {
                let gv = g.data()[0];
                let numel: usize = shape.iter().product();
                vec![Tensor::new(shape.clone(), vec![gv; numel]).expect("sum_all backward shape")]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean_all",
                axis: 0,
                shape: va.shape().to_vec(),
            });
        }
        let s: f64 = va.data().iter().sum::<f64>() / n as f64;
        let shape = va.shape().to_vec();
        Ok(self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |g| {
                let gv = g.data()[0] / n as f64;
                vec![Tensor::new(shape.clone(), vec![gv; n]).expect("mean_all backward shape")]
            })),
        ))
    }

    /// Per-slice maximum along `axis` with the first index attaining it.
    /// The gradient is routed to the argmax element only.
    pub fn reduce_max(&mut self, a: NodeId, axis: usize) -> Result<(NodeId, Vec<usize>)> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::InvalidAxis { axis, shape });
            }
        };
        if axis >= shape.len().max(1) {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        // Normalize to "reduce over columns of a rows×cols view".
        let over_cols = shape.len() == 1 || axis == 1;
        let (slices, width) = if over_cols { (rows, cols) } else { (cols, rows) };
        if width == 0 {
            return Err(TensorError::EmptyAxis {
                op: "reduce_max",
                axis,
                shape,
            });
        }
        let mut values = Vec::with_capacity(slices);
        let mut indices = Vec::with_capacity(slices);
        for s in 0..slices {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..width {
                let v = if over_cols {
                    va.data()[s * cols + i]
                } else {
                    va.data()[i * cols + s]
                };
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            values.push(best);
            indices.push(best_i);
        }
        let out_shape = if shape.len() == 1 {
            vec![]
        } else {
            vec![slices]
        };
        let out = Tensor::new(out_shape, values)?;
        let idx = indices.clone();
        let in_shape = shape.clone();
        let id = self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(in_shape.clone());
                for (s, &i) in idx.iter().enumerate() {
                    let flat = if over_cols { s * cols + i } else { i * cols + s };
                    dx.data_mut()[flat] = g.data()[s];
                }
                vec![dx]
            })),
        );
        Ok((id, indices))
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose requires rank-2, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_data(va.data(), r, c))?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(vec![r, c], transpose_data(g.data(), c, r))
                    .expect("transpose backward shape")]
            })),
        ))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let w = widths.clone();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads: Vec<Tensor> =
                    w.iter().map(|&c| Tensor::zeros(vec![rows, c])).collect();
                for i in 0..rows {
                    let mut off = 0;
                    for (k, &c) in w.iter().enumerate() {
                        let dst = &mut grads[k].data_mut()[i * c..(i + 1) * c];
                        dst.copy_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        off += c;
                    }
                }
                grads
            })),
        ))
    }

    /// Column slice `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 || end > va.cols() || start >= end {
            return Err(TensorError::Contract(format!(
                "slice_cols [{start}, {end}) invalid for shape {:?}",
                va.shape()
            )));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for i in 0..rows {
                    dx.data_mut()[i * cols + start..i * cols + end]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![dx]
            })),
        ))
    }

    /// Repeat a single row (rank-1 `[d]` or rank-2 `[1×d]`) `n` times.
    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let va = self.value(a);
        let ok = va.shape().len() == 1 || (va.shape().len() == 2 && va.shape()[0] == 1);
        if !ok || n == 0 {
            return Err(TensorError::Contract(format!(
                "repeat_row needs a single row and n >= 1, got shape {:?}, n = {n}",
                va.shape()
            )));
        }
        let d = va.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::new(vec![n, d], data)?;
        let in_shape = va.shape().to_vec();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        acc[j] += g.data()[i * d + j];
                    }
                }
                vec![Tensor::new(in_shape.clone(), acc).expect("repeat_row backward shape")]
            })),
        ))
    }

    /// Add a rank-1 bias row to every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.cols() != vb.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(va.data()[i * cols + j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            out,
            vec![a, bias],
            Some(Box::new(move |g| {
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g.data()[i * cols + j];
                    }
                }
                vec![
                    g.clone(),
                    Tensor::new(vec![cols], db).expect("add_row backward shape"),
                ]
            })),
        ))
    }

    /// Assemble a `rows×cols` matrix from scalar nodes in row-major order.
    pub fn stack_scalars(&mut self, rows: usize, cols: usize, ids: &[NodeId]) -> Result<NodeId> {
        if ids.len() != rows * cols {
            return Err(TensorError::ShapeDataMismatch {
                shape: vec![rows, cols],
                len: ids.len(),
            });
        }
        let mut data = Vec::with_capacity(ids.len());
        for &id in ids {
            data.push(self.value(id).scalar_value()?);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let n = ids.len();
        Ok(self.push(
            out,
            ids.to_vec(),
            Some(Box::new(move |g| {
                (0..n).map(|k| Tensor::scalar(g.data()[k])).collect()
            })),
        ))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (p, q, r) = (va.rows(), va.cols(), vb.cols());
        let out = Tensor::new(vec![p, r], matmul_data(va.data(), vb.data(), p, q, r))?;
        let (sa, sb) = (va.clone(), vb.clone());
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = transpose_data(sb.data(), q, r);
                let da = matmul_data(g.data(), &bt, p, r, q);
                let at = transpose_data(sa.data(), p, q);
                let db = matmul_data(&at, g.data(), q, p, r);
                vec![
                    Tensor::new(vec![p, q], da).expect("matmul backward shape"),
                    Tensor::new(vec![q, r], db).expect("matmul backward shape"),
                ]
            })),
        ))
    }

    /// Stable softmax along `axis` (max-subtracted). Rank-1 tensors use axis 0.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let rank = shape.len();
        if (rank == 1 && axis != 0) || (rank == 2 && axis > 1) || rank == 0 || rank > 2 {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let (rows, cols) = if rank == 1 {
            (1, shape[0])
        } else {
            (shape[0], shape[1])
        };
        let over_cols = rank == 1 || axis == 1;
        if (over_cols && cols == 0) || (!over_cols && rows == 0) {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let out_data = softmax_data(va.data(), rows, cols, over_cols);
        let out = Tensor::new(shape.clone(), out_data)?;
        let s = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![softmax_backward(g, &s, rows, cols, over_cols)]
            })),
        ))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vx.shape().len() != 2 || vg.shape().len() != 1 || vb.shape().len() != 1 {
            return Err(TensorError::Contract(format!(
                "layer_norm expects [t×d], [d], [d]; got {:?}, {:?}, {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let (rows, cols) = (vx.rows(), vx.cols());
        if vg.numel() != cols || vb.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = vx.row(i);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for j in 0..cols {
                let xh = (row[j] - mu) * istd;
                xhat.push(xh);
                out.push(vg.data()[j] * xh + vb.data()[j]);
            }
        }
        let gain_data = vg.data().to_vec();
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for i in 0..rows {
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let xh = &xhat[i * cols..(i + 1) * cols];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gain_data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for j in 0..cols {
                        let dxh = gr[j] * gain_data[j];
                        dx[i * cols + j] = inv_std[i] * (dxh - m1 - xh[j] * m2);
                    }
                }
                vec![
                    Tensor::new(vec![rows, cols], dx).expect("layer_norm backward shape"),
                    Tensor::new(vec![cols], dgain).expect("layer_norm backward shape"),
                    Tensor::new(vec![cols], dbias).expect("layer_norm backward shape"),
                ]
            })),
        ))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean over rows of `-log softmax(row)[diagonal]` for a square logit
    /// matrix. Computed through log-sum-exp, so large logits are safe.
    pub fn cross_entropy_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.rows() != va.cols() || va.rows() == 0 {
            return Err(TensorError::Contract(format!(
                "cross_entropy_diag expects a nonempty square matrix, got {:?}",
                va.shape()
            )));
        }
        let t = va.rows();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(t * t);
        for i in 0..t {
            let row = va.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss += lse - row[i];
            for v in row {
                probs.push((v - m).exp() / sum);
            }
        }
        loss /= t as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![a],
            Some(Box::new(move |g| {
                let gv = g.data()[0] / t as f64;
                let mut dx = probs.clone();
                for i in 0..t {
                    dx[i * t + i] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= gv;
                }
                vec![Tensor::new(vec![t, t], dx).expect("cross_entropy_diag backward shape")]
            })),
        ))
    }

    /// Mean over rows of `KL(p ‖ softmax(q_logits))`. `p` is a fixed
    /// reference distribution per row; the gradient reaches the logits only.
    pub fn kl_div_rows(&mut self, p: &Tensor, q_logits: NodeId) -> Result<NodeId> {
        let vq = self.value(q_logits);
        if p.shape() != vq.shape() || p.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div_rows",
                lhs: p.shape().to_vec(),
                rhs: vq.shape().to_vec(),
            });
        }
        let (rows, cols) = (p.rows(), p.cols());
        if cols == 0 || rows == 0 {
            return Err(TensorError::EmptyAxis {
                op: "kl_div_rows",
                axis: 1,
                shape: p.shape().to_vec(),
            });
        }
        let mut kl = 0.0;
        let mut q = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = vq.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..cols {
                let pj = p.data()[i * cols + j];
                let log_qj = row[j] - lse;
                q.push((row[j] - m).exp() / sum);
                if pj > 0.0 {
                    kl += pj * (pj.ln() - log_qj);
                }
            }
        }
        kl /= rows as f64;
        let p_data = p.data().to_vec();
        Ok(self.push(
            Tensor::scalar(kl),
            vec![q_logits],
            Some(Box::new(move |g| {
                let gv = g.data()[0] / rows as f64;
                let dx: Vec<f64> = q
                    .iter()
                    .zip(&p_data)
                    .map(|(qj, pj)| gv * (qj - pj))
                    .collect();
                vec![Tensor::new(vec![rows, cols], dx).expect("kl_div_rows backward shape")]
            })),
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each node is visited exactly once,
    /// in reverse creation (= reverse topological) order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let parent_grads = back(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => accumulate(acc, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(acc: &mut Tensor, add: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a += b;
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("hadamard shape")
}

fn scale_data(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::new(a.shape().to_vec(), data).expect("scale shape")
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn matmul_data(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

fn softmax_data(data: &[f64], rows: usize, cols: usize, over_cols: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let (slices, width) = if over_cols { (rows, cols) } else { (cols, rows) };
    for s in 0..slices {
        let at = |i: usize| {
            if over_cols {
                s * cols + i
            } else {
                i * cols + s
            }
        };
        let mut m = f64::NEG_INFINITY;
        for i in 0..width {
            m = m.max(data[at(i)]);
        }
        let mut sum = 0.0;
        for i in 0..width {
            let e = (data[at(i)] - m).exp();
            out[at(i)] = e;
            sum += e;
        }
        for i in 0..width {
            out[at(i)] /= sum;
        }
    }
    out
}

fn softmax_backward(g: &Tensor, s: &Tensor, rows: usize, cols: usize, over_cols: bool) -> Tensor {
    let mut dx = vec![0.0; g.numel()];
    let (slices, width) = if over_cols { (rows, cols) } else { (cols, rows) };
    for sl in 0..slices {
        let at = |i: usize| {
            if over_cols {
                sl * cols + i
            } else {
                i * cols + sl
            }
        };
        let mut dot = 0.0;
        for i in 0..width {
            dot += g.data()[at(i)] * s.data()[at(i)];
        }
        for i in 0..width {
            dx[at(i)] = s.data()[at(i)] * (g.data()[at(i)] - dot);
        }
    }
    Tensor::new(s.shape().to_vec(), dx).expect("softmax backward shape")
}
