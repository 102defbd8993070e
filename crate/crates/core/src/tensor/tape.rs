//! Reverse-mode tape. Every operation appends a node holding its output
//! value; [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates gradients additively, so a value used twice receives both
//! contributions.

use super::{Tensor, TensorError};

/// tanh-approximation GELU constant, sqrt(2/π) rounded to 10 digits.
pub const GELU_COEFF: f64 = 0.797_884_560_8;
const GELU_CUBIC: f64 = 0.044_715;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEFF * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_COEFF * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`;
    /// `None` when `v` does not influence the root.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (o, &b) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * b;
                }
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2("transpose")?;
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[m×n] + bias[n]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2("add_row_bias")?;
        if tb.shape() != [n] {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let b = tb.data();
        let data = tx.data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b)).collect();
        let t = Tensor::new(tx.shape(), data)?;
        Ok(self.push(t, Op::AddRowBias(x, bias)))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|v| v * c).collect() };
        self.push(out, Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| f(v)).collect() };
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `0.5·x·(1 + tanh(GELU_COEFF·(x + 0.044715·x³)))`
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (_, n) = t.dims2("softmax_rows")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(t.shape(), out)?;
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Per row `(x - mean) / sqrt(var + eps) · gain + bias`, biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::Invalid { op: "layer_norm", msg: format!("eps must be positive, got {eps}") });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, n) = tx.dims2("layer_norm")?;
        if tg.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let c = match t.shape() {
            [c] | [1, c] => *c,
            s => return Err(TensorError::Invalid { op: "cross_entropy", msg: format!("expected 1×c logits, got {s:?}") }),
        };
        if target >= c {
            return Err(TensorError::IndexOutOfRange { index: target, len: c });
        }
        let d = t.data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = d.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let probs: Vec<f64> = d.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - d[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }))
    }

    /// Rows `idx` of a matrix, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, len: r });
            }
            out.extend_from_slice(t.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::Invalid { op: "slice_rows", msg: format!("rows {start}..{} of {r}", start + len) });
        }
        let t = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid { op: "slice_cols", msg: format!("cols {start}..{} of {c}", start + len) });
        }
        let data = t.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let t = Tensor::new(&[r, len], data)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid { op: "concat_rows", msg: "no inputs".into() })?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c2) = t.dims2("concat_rows")?;
            if c2 != c {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid { op: "concat_cols", msg: "no inputs".into() })?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r2, c) = t.dims2("concat_cols")?;
            if r2 != r {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `[1×m]` mean of the rows of an `m×n` matrix, as a product with a
    /// constant averaging row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, _) = self.value(x).dims2("mean_rows")?;
        let avg = self.leaf(Tensor::filled(&[1, m], 1.0 / m as f64));
        self.matmul(avg, x)
    }

    /// Backpropagate from a single-element `root`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must hold one value, shape {:?}", self.shape(root)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: node values are read while gradient buffers are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let out = &node.value;
        macro_rules! val {
            ($v:expr) => {
                &nodes[$v.0].value
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val!(a), val!(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                {
                    let ga = self.acc_len(*a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let gb = self.acc_len(*b, k * n);
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += aip * gv;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val!(a).shape()[0], val!(a).shape()[1]);
                let ga = self.acc_len(*a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc_len(*a, g.len()), g);
                add_into(self.acc_len(*b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val!(a).data(), val!(b).data());
                for ((o, gv), bv) in self.acc_len(*a, g.len()).iter_mut().zip(g).zip(bd) {
                    *o += gv * bv;
                }
                for ((o, gv), av) in self.acc_len(*b, g.len()).iter_mut().zip(g).zip(ad) {
                    *o += gv * av;
                }
            }
            Op::AddRowBias(x, b) => {
                add_into(self.acc_len(*x, g.len()), g);
                let n = val!(b).len();
                let gb = self.acc_len(*b, n);
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, c) => {
                for (o, gv) in self.acc_len(*x, g.len()).iter_mut().zip(g) {
                    *o += c * gv;
                }
            }
            Op::Relu(x) => {
                let xd = val!(x).data();
                for ((o, gv), xv) in self.acc_len(*x, g.len()).iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = val!(x).data();
                for ((o, gv), xv) in self.acc_len(*x, g.len()).iter_mut().zip(g).zip(xd) {
                    *o += gv * gelu_grad(*xv);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape()[1];
                let gx = self.acc_len(*x, g.len());
                for ((y, gr), o) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        o[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.shape()[1];
                let gd = val!(gain).data();
                {
                    let gg = self.acc_len(*gain, n);
                    for (xh, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                }
                {
                    let gbias = self.acc_len(*bias, n);
                    for gr in g.chunks(n) {
                        add_into(gbias, gr);
                    }
                }
                let gx = self.acc_len(*x, g.len());
                let nf = n as f64;
                for (((xh, gr), o), r) in xhat.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).zip(rstd) {
                    let dxh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        o[j] += r / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gl = self.acc_len(*logits, probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    gl[j] += g[0] * (p - onehot);
                }
            }
            Op::GatherRows(x, idx) => {
                let c = out.shape()[1];
                let len = val!(x).len();
                let gx = self.acc_len(*x, len);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.shape()[1];
                let len = val!(x).len();
                add_into(&mut self.acc_len(*x, len)[start * c..start * c + g.len()], g);
            }
            Op::SliceCols(x, start) => {
                let w = out.shape()[1];
                let c = val!(x).shape()[1];
                let len = val!(x).len();
                let gx = self.acc_len(*x, len);
                for (r, gr) in g.chunks(w).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + w], gr);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val!(p).len();
                    add_into(self.acc_len(*p, len), &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = val!(p).shape()[1];
                    let len = val!(p).len();
                    let gp = self.acc_len(*p, len);
                    for (r, gr) in g.chunks(total).enumerate() {
                        add_into(&mut gp[r * w..(r + 1) * w], &gr[col..col + w]);
                    }
                    col += w;
                }
            }
            Op::Sum(x) => {
                let len = val!(x).len();
                self.acc_len(*x, len).iter_mut().for_each(|o| *o += g[0]);
            }
        }
        self.nodes = nodes;
    }

    fn acc_len(&mut self, v: Var, n: usize) -> &mut [f64] {
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
