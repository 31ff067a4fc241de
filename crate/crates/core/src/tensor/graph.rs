use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm};
use super::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Parameter leaves borrow their values from a [`ParamStore`], so building
/// a graph never copies model weights. A node requires a gradient iff it
/// is a trainable leaf or depends on one; everything else is skipped in
/// [`Graph::backward`].
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(Cow::Borrowed(&p.tensor), Op::Leaf, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradients of all bound trainable parameters out of the tape.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.dims2("matmul")?;
        let (k2, m) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (m as isize, 1),
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.dims2("matmul_nt")?;
        let (m, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (1, k as isize),
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulNT(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, m) = av.dims2("add_row")?;
        if bv.len() != m {
            return Err(mismatch("add_row", av, bv));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization of an `n×d` matrix with affine `gain`
    /// and `bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("layer_norm")?;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.len() != d {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out.data_mut()[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
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

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (data[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    data[idx(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Softmax { x, axis }, rg))
    }

    /// Row-wise softmax of an `n×m` matrix where columns with
    /// `keep[j] == false` receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, m) = xv.dims2("masked_softmax")?;
        if keep.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: xv.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = xv.row(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = &mut out.data_mut()[i * m..(i + 1) * m];
            let mut total = 0.0;
            for j in 0..m {
                if keep[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::MaskedSoftmax(x), rg))
    }

    /// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::IndexOutOfRange {
            op: "concat",
            index: 0,
            len: 0,
        })?;
        let (r0, c0) = self.value(first).dims2("concat")?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: self.value(first).shape().to_vec(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
            total += if axis == 0 { r } else { c };
        }
        let out = if axis == 0 {
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::new(vec![total, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r0, total], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[start..end]` along `axis` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice")?;
        let len = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(TensorError::InvalidAxis {
                    op: "slice",
                    axis,
                    shape: xv.shape().to_vec(),
                })
            }
        };
        if start > end || end > len {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end,
                len,
            });
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], xv.data()[start * c..end * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&xv.row(i)[start..end]);
            }
            Tensor::new(vec![r, end - start], data)?
        };
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Slice { x, axis, start }, rg))
    }

    /// Gathers rows of a `vocab×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (rows, d) = tv.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(x), rg)
    }

    /// Mean cross-entropy of `n×k` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, k) = lv.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(TensorError::LabelOutOfRange { label: y, classes: k });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[y];
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of `loss` for every node that requires one.
    /// Clears gradients from any previous call first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let loss_shape = lv.shape().to_vec();
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let gd = g.data();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = val(nodes, *a).shape_pair();
                let m = val(nodes, *b).shape()[1];
                if rg(nodes, *a) {
                    let bv = val(nodes, *b);
                    let da = acc(grads, nodes, *a).unwrap();
                    gemm(n, m, k, gd, (m as isize, 1), bv.data(), (1, m as isize), da, true);
                }
                if rg(nodes, *b) {
                    let av = val(nodes, *a);
                    let db = acc(grads, nodes, *b).unwrap();
                    gemm(k, n, m, av.data(), (1, k as isize), gd, (m as isize, 1), db, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = val(nodes, *a).shape_pair();
                let m = val(nodes, *b).shape()[0];
                if rg(nodes, *a) {
                    let bv = val(nodes, *b);
                    let da = acc(grads, nodes, *a).unwrap();
                    gemm(n, m, k, gd, (m as isize, 1), bv.data(), (k as isize, 1), da, true);
                }
                if rg(nodes, *b) {
                    let av = val(nodes, *a);
                    let db = acc(grads, nodes, *b).unwrap();
                    gemm(m, n, k, gd, (1, m as isize), av.data(), (k as isize, 1), db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc(grads, nodes, v) {
                        d.iter_mut().zip(gd).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, g)| *x += g);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(nodes, *a), val(nodes, *b));
                if let Some(d) = acc(grads, nodes, *a) {
                    for ((x, g), y) in d.iter_mut().zip(gd).zip(bv.data()) {
                        *x += g * y;
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for ((x, g), y) in d.iter_mut().zip(gd).zip(av.data()) {
                        *x += g * y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, g)| *x += g);
                }
                let m = g.shape()[1];
                if let Some(d) = acc(grads, nodes, *bias) {
                    for row in gd.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, g)| *x += s * g);
                }
            }
            Op::Gelu(a) => {
                let av = val(nodes, *a);
                if let Some(d) = acc(grads, nodes, *a) {
                    for ((x, g), v) in d.iter_mut().zip(gd).zip(av.data()) {
                        *x += g * gelu_grad(*v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.shape()[1];
                let n = g.shape()[0];
                if let Some(db) = acc(grads, nodes, *bias) {
                    for row in gd.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                    }
                }
                if let Some(dg) = acc(grads, nodes, *gain) {
                    for (row, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * xh[j];
                        }
                    }
                }
                if rg(nodes, *x) {
                    let gain_v = val(nodes, *gain);
                    let dx = acc(grads, nodes, *x).unwrap();
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let grow = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gain_v.data()[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += scale * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &*nodes[i].value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                if let Some(dx) = acc(grads, nodes, *x) {
                    let yd = y.data();
                    for o in 0..outer {
                        for e in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + e;
                            let dot: f64 = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] += yd[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = &*nodes[i].value;
                let m = y.shape()[1];
                if let Some(dx) = acc(grads, nodes, *x) {
                    for (r, (yr, gr)) in y.data().chunks(m).zip(gd.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dx[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = val(nodes, p).shape_pair();
                    if let Some(dp) = acc(grads, nodes, p) {
                        if *axis == 0 {
                            let src = &gd[offset * pc..(offset + pr) * pc];
                            dp.iter_mut().zip(src).for_each(|(x, g)| *x += g);
                        } else {
                            for r in 0..pr {
                                let src = &gd[r * total_cols + offset..r * total_cols + offset + pc];
                                dp[r * pc..(r + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, g)| *x += g);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let (_, c) = val(nodes, *x).shape_pair();
                let (gr, gc) = g.shape_pair();
                if let Some(dx) = acc(grads, nodes, *x) {
                    if *axis == 0 {
                        let dst = &mut dx[start * c..(start + gr) * c];
                        dst.iter_mut().zip(gd).for_each(|(x, g)| *x += g);
                    } else {
                        for r in 0..gr {
                            let dst = &mut dx[r * c + start..r * c + start + gc];
                            dst.iter_mut()
                                .zip(&gd[r * gc..(r + 1) * gc])
                                .for_each(|(x, g)| *x += g);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = g.shape()[1];
                if let Some(dt) = acc(grads, nodes, *table) {
                    for (row, &id) in gd.chunks(d).zip(ids) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let d = g.shape()[1];
                if let Some(dx) = acc(grads, nodes, *x) {
                    for (row, &r) in gd.chunks(d).zip(rows) {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(nodes, *x).shape_pair();
                if let Some(dx) = acc(grads, nodes, *x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += gd[b * r + a];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Mean(x) => {
                let n = val(nodes, *x).len().max(1) as f64;
                let s = gd[0] / n;
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len().max(1);
                let k = probs.len() / n;
                let s = gd[0] / n as f64;
                if let Some(dl) = acc(grads, nodes, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn val<'n>(nodes: &'n [Node<'_>], v: Var) -> &'n Tensor {
    &nodes[v.0].value
}

fn rg(nodes: &[Node<'_>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Gradient slot of `v`, allocated on first touch; `None` when `v` needs no gradient.
fn acc<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node<'_>], v: Var) -> Option<&'g mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut().map(Tensor::data_mut)
}

trait ShapePair {
    fn shape_pair(&self) -> (usize, usize);
}

impl ShapePair for Tensor {
    fn shape_pair(&self) -> (usize, usize) {
        let s = self.shape();
        (s[0], s.get(1).copied().unwrap_or(1))
    }
}
