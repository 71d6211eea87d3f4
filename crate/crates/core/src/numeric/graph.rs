use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{Gradients, NumericError, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    ClampMin(Var, f64),
    SumCols(Var),
    Sum(Var),
    SelectSum(Var, Vec<Vec<usize>>),
    DepthwiseConv(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
/// Parameters are read from the borrowed store; gradients come back from
/// [`Graph::backward`] and are applied by the caller.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: HashMap::new(), rng: None }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(store: &'a ParamStore, seed: u64) -> Self {
        Graph { rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Graph::new(store) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(NumericError::shape("matmul", &self.dims(a), &self.dims(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(NumericError::shape("matmul_bt", &self.dims(a), &self.dims(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulBt(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), t, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    /// Broadcast-add a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (_, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(NumericError::shape("add_row", &self.dims(a), &self.dims(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.dims(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    /// Multiply every row elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (_, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(NumericError::shape("mul_row", &self.dims(a), &self.dims(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::MulRow(a, row), t, rg))
    }

    /// Scale row i of an m×n matrix by entry i of an m×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumericError> {
        let (m, n) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(NumericError::shape("mul_col", &self.dims(a), &self.dims(col)));
        }
        let c = self.value(col).data().to_vec();
        let mut t = self.value(a).clone();
        for (chunk, s) in t.data_mut().chunks_mut(n).zip(&c) {
            for x in chunk {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(Op::MulCol(a, col), t, rg))
    }

    /// scale·a + shift
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(Op::Affine(a, scale), t, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts.first().ok_or(NumericError::EmptyConcat)?;
        let m = self.shape(first).0;
        let mut n = 0;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(NumericError::shape("concat_cols", &self.dims(first), &self.dims(p)));
            }
            n += self.shape(p).1;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts.first().ok_or(NumericError::EmptyConcat)?;
        let n = self.shape(first).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).1 != n {
                return Err(NumericError::shape("concat_rows", &self.dims(first), &self.dims(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NumericError> {
        let (m, n) = self.shape(a);
        if width == 0 || start + width > n {
            return Err(NumericError::Slice { op: "slice_cols", start, width, len: n });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src.row_slice(i)[start..start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), Tensor::new(vec![m, width], out)?, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var, NumericError> {
        let (m, n) = self.shape(a);
        if count == 0 || start + count > m {
            return Err(NumericError::Slice { op: "slice_rows", start, width: count, len: m });
        }
        let out = self.value(a).data()[start * n..(start + count) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start), Tensor::new(vec![count, n], out)?, rg))
    }

    /// Row lookup; also used for embeddings.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.shape(a);
        if ids.is_empty() {
            return Err(NumericError::EmptyConcat);
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(NumericError::Index { index: i, len: m });
            }
            out.extend_from_slice(self.value(a).row_slice(i));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, ids.to_vec()), Tensor::new(vec![ids.len(), n], out)?, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericError> {
        let t = self.value(a).reshaped(&[rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Row-wise softmax. `mask[i]` false excludes entry i (zero probability);
    /// a row with no allowed entries is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericError> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(NumericError::MaskShape { expected: m * n, got: mask.len() });
            }
        }
        let allowed = |k: usize| mask.is_none_or(|mk| mk[k]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row_slice(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(i * n + j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericError::AllMasked { row: i });
            }
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(i * n + j) {
                    let e = (x - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), Tensor::new(vec![m, n], out)?, rg))
    }

    /// Row-wise layer normalization with 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericError> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(NumericError::shape("layer_norm", &self.dims(x), &self.dims(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), t, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), t, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Log(a), t, rg)
    }

    /// max(a, floor); the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(Op::ClampMin(a, floor), t, rg)
    }

    /// m×n -> m×1 row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Op::SumCols(a), Tensor::column(data), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Output g×1 where entry k sums the flat entries listed in `groups[k]`.
    pub fn select_sum(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var, NumericError> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut s = 0.0;
            for &k in g {
                if k >= t.len() {
                    return Err(NumericError::Index { index: k, len: t.len() });
                }
                s += t.data()[k];
            }
            out.push(s);
        }
        if out.is_empty() {
            return Err(NumericError::EmptyConcat);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SelectSum(a, groups.to_vec()), Tensor::column(out), rg))
    }

    /// Depthwise convolution along rows: x is L×d, w is k×d with k odd,
    /// zero padding of (k−1)/2 at both ends.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var, NumericError> {
        let (l, d) = self.shape(x);
        let (k, d2) = self.shape(w);
        if d != d2 {
            return Err(NumericError::shape("depthwise_conv", &self.dims(x), &self.dims(w)));
        }
        if k % 2 == 0 {
            return Err(NumericError::EvenWindow(k));
        }
        let half = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for o in 0..k {
                let src = i as isize + o as isize - half;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[i * d + c] += wv[o * d + c] * xv[src * d + c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::DepthwiseConv(x, w), Tensor::new(vec![l, d], out)?, rg))
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, NumericError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericError::DropoutRate(rate));
        }
        if rate == 0.0 || self.rng.is_none() {
            return Ok(a);
        }
        let n = self.value(a).len();
        let rng = self.rng.as_mut().expect("training graph");
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.dims(a), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, mask), t, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericError::shape(op, &self.dims(a), &self.dims(b)));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar. Returns the gradient of every parameter
    /// the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if self.nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(e) => e.add_assign(&t),
                        slot @ None => *slot = Some(t),
                    }
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_bt_into(gd, self.value(*b).data(), &mut ga, m, n, k);
                        acc(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        matmul_at_into(self.value(*a).data(), gd, &mut gb, m, k, n);
                        acc(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_into(gd, self.value(*b).data(), &mut ga, m, n, k);
                        acc(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; n * k];
                        matmul_at_into(gd, self.value(*a).data(), &mut gb, m, n, k);
                        acc(*b, Tensor::new(vec![n, k], gb)?);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (s, x) in gr.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    acc(*row, Tensor::row(gr));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(*a, Tensor::new(av.shape().to_vec(), zip_mul(gd, bv.data()))?);
                    }
                    if self.rg(*b) {
                        acc(*b, Tensor::new(bv.shape().to_vec(), zip_mul(gd, av.data()))?);
                    }
                }
                Op::MulRow(a, row) => {
                    let n = g.cols();
                    let av = self.value(*a);
                    let rv = self.value(*row).data();
                    if self.rg(*row) {
                        let mut gr = vec![0.0; n];
                        for (gc, ac) in gd.chunks(n).zip(av.data().chunks(n)) {
                            for j in 0..n {
                                gr[j] += gc[j] * ac[j];
                            }
                        }
                        acc(*row, Tensor::row(gr));
                    }
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        for chunk in ga.data_mut().chunks_mut(n) {
                            for (x, r) in chunk.iter_mut().zip(rv) {
                                *x *= r;
                            }
                        }
                        acc(*a, ga);
                    }
                }
                Op::MulCol(a, col) => {
                    let n = g.cols();
                    let av = self.value(*a);
                    let cv = self.value(*col).data();
                    if self.rg(*col) {
                        let gc: Vec<f64> = gd
                            .chunks(n)
                            .zip(av.data().chunks(n))
                            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                            .collect();
                        acc(*col, Tensor::column(gc));
                    }
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        for (chunk, s) in ga.data_mut().chunks_mut(n).zip(cv) {
                            for x in chunk {
                                *x *= s;
                            }
                        }
                        acc(*a, ga);
                    }
                }
                Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
                Op::MulConst(a, mask) => {
                    let shape = g.shape().to_vec();
                    acc(*a, Tensor::new(shape, zip_mul(gd, mask))?);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            let mut gp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                gp.extend_from_slice(&gd[i * n + offset..i * n + offset + w]);
                            }
                            acc(p, Tensor::new(vec![m, w], gp)?);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(p, Tensor::new(vec![h, n], gd[offset * n..(offset + h) * n].to_vec())?);
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.shape(*a);
                    let w = g.cols();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    acc(*a, Tensor::new(vec![m, n], ga)?);
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = vec![0.0; m * n];
                    ga[start * n..start * n + gd.len()].copy_from_slice(gd);
                    acc(*a, Tensor::new(vec![m, n], ga)?);
                }
                Op::GatherRows(a, ids) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = vec![0.0; m * n];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += gd[r * n + j];
                        }
                    }
                    acc(*a, Tensor::new(vec![m, n], ga)?);
                }
                Op::Reshape(a) => {
                    let shape = self.dims(*a);
                    acc(*a, Tensor::new(shape, gd.to_vec())?);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let n = y.cols();
                    let mut ga = vec![0.0; gd.len()];
                    for ((gc, yc), oc) in gd.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gc.iter().zip(yc).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            oc[j] = yc[j] * (gc[j] - dot);
                        }
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), ga)?);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (m, n) = (g.rows(), g.cols());
                    let gv = self.value(*gain).data();
                    if self.rg(*gain) || self.rg(*bias) {
                        let mut gg = vec![0.0; n];
                        let mut gb = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                gg[j] += gd[i * n + j] * xhat[i * n + j];
                                gb[j] += gd[i * n + j];
                            }
                        }
                        acc(*gain, Tensor::row(gg));
                        acc(*bias, Tensor::row(gb));
                    }
                    if self.rg(*x) {
                        let mut gx = vec![0.0; m * n];
                        for i in 0..m {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..n {
                                let dh = gd[i * n + j] * gv[j];
                                mean_d += dh;
                                mean_dx += dh * xhat[i * n + j];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for j in 0..n {
                                let dh = gd[i * n + j] * gv[j];
                                gx[i * n + j] = inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
                            }
                        }
                        acc(*x, Tensor::new(vec![m, n], gx)?);
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let shape = av.shape().to_vec();
                    acc(*a, Tensor::new(shape, av.data().iter().zip(gd).map(|(&x, d)| d * gelu_grad(x)).collect())?);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("tanh output");
                    let data = y.data().iter().zip(gd).map(|(t, d)| d * (1.0 - t * t)).collect();
                    acc(*a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("sigmoid output");
                    let data = y.data().iter().zip(gd).map(|(s, d)| d * s * (1.0 - s)).collect();
                    acc(*a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let data = av.data().iter().zip(gd).map(|(x, d)| d / x).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::ClampMin(a, floor) => {
                    let av = self.value(*a);
                    let data = av.data().iter().zip(gd).map(|(x, d)| if x < floor { 0.0 } else { *d }).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::SumCols(a) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Vec::with_capacity(m * n);
                    for &d in gd {
                        ga.extend(std::iter::repeat_n(d, n));
                    }
                    acc(*a, Tensor::new(vec![m, n], ga)?);
                }
                Op::Sum(a) => {
                    let shape = self.dims(*a);
                    acc(*a, Tensor::full(&shape, gd[0]));
                }
                Op::SelectSum(a, groups) => {
                    let shape = self.dims(*a);
                    let mut ga = Tensor::zeros(&shape);
                    for (grp, &d) in groups.iter().zip(gd) {
                        for &k in grp {
                            ga.data_mut()[k] += d;
                        }
                    }
                    acc(*a, ga);
                }
                Op::DepthwiseConv(x, w) => {
                    let (l, d) = self.shape(*x);
                    let k = self.shape(*w).0;
                    let half = (k / 2) as isize;
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut gx = vec![0.0; l * d];
                    let mut gw = vec![0.0; k * d];
                    for i in 0..l {
                        for o in 0..k {
                            let src = i as isize + o as isize - half;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..d {
                                let go = gd[i * d + c];
                                gw[o * d + c] += go * xv[src * d + c];
                                gx[src * d + c] += go * wv[o * d + c];
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![l, d], gx)?);
                    acc(*w, Tensor::new(vec![k, d], gw)?);
                }
            }
        }
        Ok(out)
    }
}

fn zip_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

/// tanh approximation of x·Φ(x).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
