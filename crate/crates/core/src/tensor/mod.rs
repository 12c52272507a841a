//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! `Tensor` is a plain value (shape + row-major data). Differentiable
//! computation happens on a `Tape`: every op eagerly computes its forward
//! value, records its inputs, and returns a `Var` handle. `Tape::backward`
//! walks the recording in reverse and accumulates gradients for every leaf
//! created with `requires_grad`. Tensors are immutable once created; a tape
//! is single-owner, so independent tapes may run on different threads.
//!
//! Everything is f64 end to end. Shape misuse is a programming error and
//! panics with both shapes in the message.

mod check;
mod checkpoint;
mod nn;

pub use check::{finite_diff_check, finite_diff_check_multi, FiniteDiffReport};
pub use checkpoint::{
    read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_bytes,
    CHECKPOINT_VERSION,
};
pub use nn::{init_uniform, mlp_forward, multi_head_attention, Activation, Linear, Mlp};

/// Variance floor added inside `layer_norm`. Population variance over the row,
/// no learned affine; scale/shift, when wanted, is applied by the caller.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Plain tensor value: row-major data with an explicit shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows: {} vs {}", r.len(), d);
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![rows.len(), d], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (n, d) = self.dims2();
        assert!(i < n, "row {i} out of bounds for {n} rows");
        &self.data[i * d..(i + 1) * d]
    }
}

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n x d] + [d]`, the only broadcast in the op set.
    AddBiasRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    PowConst(Var, f64),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Sum(Var),
    LayerNorm(Var, f64),
    SoftmaxRows(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    /// Negative control for the gradient checker: forward is `x * c`, but the
    /// recorded backward rule deliberately uses `c + 1`.
    CorruptScale(Var, f64),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation: an append-only list of nodes in topological order
/// (every op's inputs precede it, by construction).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`. Leaves that the loss does
/// not reach report zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, zeros if the loss never reached it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Mount a tensor as a gradient leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Mount a tensor as a constant (no gradient tracked).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected 2-D operand, got shape {:?}", s);
        (s[0], s[1])
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        assert_eq!(
            ka, kb,
            "matmul shape mismatch: lhs {:?} rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for k in 0..ka {
                    let aik = da[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &db[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::Matmul(a, b), ng)
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{name} shape mismatch: lhs {:?} rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), data, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_pair(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast a `[d]` bias over every row of `[n x d]`.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Var {
        let (n, d) = self.dims2(x);
        let bs = &self.nodes[bias.0].shape;
        assert!(
            bs.len() == 1 && bs[0] == d,
            "bias shape mismatch: input {:?} bias {:?}",
            self.nodes[x.0].shape, bs
        );
        let mut data = self.nodes[x.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += b[j];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(vec![n, d], data, Op::AddBiasRow(x, bias), ng)
    }

    fn elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.elementwise(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, computed without overflow for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.elementwise(x, softplus, Op::Softplus(x))
    }

    pub fn pow_const(&mut self, x: Var, k: f64) -> Var {
        self.elementwise(x, |v| v.powf(k), Op::PowConst(x, k))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.elementwise(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.elementwise(x, f64::cos, Op::Cos(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.elementwise(x, f64::abs, Op::Abs(x))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Row-wise layer normalization without a learned affine. Uses the
    /// population variance of each row plus `eps` under the square root.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, d) = self.dims2(x);
        assert!(d >= 2, "layer_norm needs rows of width >= 2, got shape {:?}", self.nodes[x.0].shape);
        let mut out = vec![0.0; n * d];
        {
            let xd = &self.nodes[x.0].data;
            for i in 0..n {
                let row = &xd[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[i * d + j] = (row[j] - mean) * inv;
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, d], out, Op::LayerNorm(x, eps), ng)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims2(x);
        let mut out = vec![0.0; n * d];
        {
            let xd = &self.nodes[x.0].data;
            for i in 0..n {
                let row = &xd[i * d..(i + 1) * d];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..d {
                    let e = (row[j] - max).exp();
                    out[i * d + j] = e;
                    z += e;
                }
                for j in 0..d {
                    out[i * d + j] /= z;
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, d], out, Op::SoftmaxRows(x), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (na, da) = self.dims2(a);
        let (nb, db) = self.dims2(b);
        assert_eq!(
            da, db,
            "concat_rows width mismatch: lhs {:?} rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut data = Vec::with_capacity((na + nb) * da);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![na + nb, da], data, Op::ConcatRows(a, b), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (na, da) = self.dims2(a);
        let (nb, db) = self.dims2(b);
        assert_eq!(
            na, nb,
            "concat_cols height mismatch: lhs {:?} rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut data = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            data.extend_from_slice(&self.nodes[a.0].data[i * da..(i + 1) * da]);
            data.extend_from_slice(&self.nodes[b.0].data[i * db..(i + 1) * db]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![na, da + db], data, Op::ConcatCols(a, b), ng)
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.dims2(x);
        assert!(
            start + len <= d,
            "slice_cols [{start}, {}) out of bounds for shape {:?}",
            start + len,
            self.nodes[x.0].shape
        );
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.nodes[x.0].data[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        self.push(vec![n, len], data, Op::SliceCols(x, start, len), ng)
    }

    /// Select rows by index; repeats allowed, gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (n, d) = self.dims2(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows index {i} out of bounds for {n} rows");
            data.extend_from_slice(&self.nodes[x.0].data[i * d..(i + 1) * d]);
        }
        let ng = self.needs(x);
        self.push(vec![idx.len(), d], data, Op::GatherRows(x, idx.to_vec()), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, d) = self.dims2(x);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = self.nodes[x.0].data[i * d + j];
            }
        }
        let ng = self.needs(x);
        self.push(vec![d, n], data, Op::Transpose(x), ng)
    }

    /// Forward `x * c` with a deliberately wrong backward rule. Exists so the
    /// finite-difference checker's failure path stays honest; never use in
    /// real models.
    pub fn corrupt_scale(&mut self, x: Var, c: f64) -> Var {
        self.elementwise(x, |v| v * c, Op::CorruptScale(x, c))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns per-node gradients;
    /// gradient-tracked leaves the loss does not reach read back as zeros.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Gradients { grads, shapes }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    let db = &self.nodes[b.0].data;
                    Self::accumulate(grads, *a, m * k, |ga| {
                        // dA = G . B^T
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * db[kk * n + j];
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    let da = &self.nodes[a.0].data;
                    Self::accumulate(grads, *b, k * n, |gb| {
                        // dB = A^T . G
                        for i in 0..m {
                            for kk in 0..k {
                                let aik = da[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[kk * n + j] += aik * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        Self::accumulate(grads, v, g.len(), |gv| {
                            for (o, &gi) in gv.iter_mut().zip(g) {
                                *o += gi;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.len(), |gv| {
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.len(), |gv| {
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o -= gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let db = &self.nodes[b.0].data;
                    Self::accumulate(grads, *a, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * db[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let da = &self.nodes[a.0].data;
                    Self::accumulate(grads, *b, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * da[i];
                        }
                    });
                }
            }
            Op::AddBiasRow(x, bias) => {
                let d = self.nodes[bias.0].shape[0];
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
                if self.needs(*bias) {
                    Self::accumulate(grads, *bias, d, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % d] += gi;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * c;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            if dx[i] > 0.0 {
                                gv[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = &node.data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
            }
            Op::Softplus(x) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * sigmoid(dx[i]);
                        }
                    });
                }
            }
            Op::PowConst(x, k) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    let k = *k;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * k * dx[i].powf(k - 1.0);
                        }
                    });
                }
            }
            Op::Sin(x) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * dx[i].cos();
                        }
                    });
                }
            }
            Op::Cos(x) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] -= g[i] * dx[i].sin();
                        }
                    });
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let dx = &self.nodes[x.0].data;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            // Subgradient 0 at the kink.
                            gv[i] += g[i] * if dx[i] > 0.0 { 1.0 } else if dx[i] < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let numel = self.nodes[x.0].data.len();
                    Self::accumulate(grads, *x, numel, |gv| {
                        for o in gv.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
            }
            Op::LayerNorm(x, eps) => {
                if self.needs(*x) {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let xd = &self.nodes[x.0].data;
                    let y = &node.data;
                    let eps = *eps;
                    Self::accumulate(grads, *x, n * d, |gv| {
                        for i in 0..n {
                            let row = &xd[i * d..(i + 1) * d];
                            let mean = row.iter().sum::<f64>() / d as f64;
                            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let gi = &g[i * d..(i + 1) * d];
                            let yi = &y[i * d..(i + 1) * d];
                            let gm = gi.iter().sum::<f64>() / d as f64;
                            let gym = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gv[i * d + j] += inv * (gi[j] - gm - yi[j] * gym);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let s = &node.data;
                    Self::accumulate(grads, *x, n * d, |gv| {
                        for i in 0..n {
                            let si = &s[i * d..(i + 1) * d];
                            let gi = &g[i * d..(i + 1) * d];
                            let dot = si.iter().zip(gi).map(|(&a, &b)| a * b).sum::<f64>();
                            for j in 0..d {
                                gv[i * d + j] += si[j] * (gi[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].data.len();
                if self.needs(*a) {
                    Self::accumulate(grads, *a, na, |gv| {
                        for i in 0..na {
                            gv[i] += g[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let nb = self.nodes[b.0].data.len();
                    Self::accumulate(grads, *b, nb, |gv| {
                        for i in 0..nb {
                            gv[i] += g[na + i];
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let db = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    Self::accumulate(grads, *a, n * da, |gv| {
                        for i in 0..n {
                            for j in 0..da {
                                gv[i * da + j] += g[i * (da + db) + j];
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, n * db, |gv| {
                        for i in 0..n {
                            for j in 0..db {
                                gv[i * db + j] += g[i * (da + db) + da + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols(x, start, len) => {
                if self.needs(*x) {
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let (start, len) = (*start, *len);
                    Self::accumulate(grads, *x, n * d, |gv| {
                        for i in 0..n {
                            for j in 0..len {
                                gv[i * d + start + j] += g[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, idx) => {
                if self.needs(*x) {
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    Self::accumulate(grads, *x, n * d, |gv| {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                gv[i * d + j] += g[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    Self::accumulate(grads, *x, n * d, |gv| {
                        for i in 0..n {
                            for j in 0..d {
                                gv[i * d + j] += g[j * n + i];
                            }
                        }
                    });
                }
            }
            Op::CorruptScale(x, c) => {
                if self.needs(*x) {
                    let wrong = *c + 1.0;
                    Self::accumulate(grads, *x, g.len(), |gv| {
                        for i in 0..g.len() {
                            gv[i] += g[i] * wrong;
                        }
                    });
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&Tensor::new(&[2, 1], vec![5.0, 6.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[17.0, 39.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[2, 2], vec![3.0, -1.0, 4.0, 1.5]));
        let id = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let z = tape.constant(&Tensor::zeros(&[2, 2]));
        let xi = tape.matmul(x, id);
        let xz = tape.matmul(x, z);
        assert_eq!(tape.value(xi), tape.value(x));
        assert_eq!(tape.value(xz), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        tape.matmul(a, b);
    }

    #[test]
    fn layer_norm_hand_case() {
        // Row [1, 2, 3]: mean 2, population variance 2/3.
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, LAYER_NORM_EPS);
        let s = (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert_close(tape.value(y), &[-1.0 / s, 0.0, 1.0 / s], 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 4], vec![7.0; 4]));
        let y = tape.layer_norm(x, LAYER_NORM_EPS);
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.7]));
        let c = tape.constant(&Tensor::new(&[1, 4], vec![100.0; 4]));
        let xs = tape.add(x, c);
        let y0 = tape.layer_norm(x, LAYER_NORM_EPS);
        let y1 = tape.layer_norm(xs, LAYER_NORM_EPS);
        // Shifting a row moves its mean only; tiny drift comes from the
        // variance being computed at a different magnitude.
        let a = tape.value(y0).to_vec();
        let b = tape.value(y1).to_vec();
        assert_close(&a, &b, 1e-9);
    }

    #[test]
    fn layer_norm_output_moments() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[2, 5], vec![0.1, 2.0, -3.0, 0.5, 1.1, 9.0, 8.5, 10.0, 7.7, 9.3]));
        let y = tape.layer_norm(x, LAYER_NORM_EPS);
        let d = 5;
        for i in 0..2 {
            let row = &tape.value(y)[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "row {i} mean {mean}");
            // Rows here have variance >> 1e-3, so normalized variance sits
            // within 10*eps of 1.
            assert!((var - 1.0).abs() < 10.0 * LAYER_NORM_EPS, "row {i} var {var}");
        }
    }

    #[test]
    #[should_panic(expected = "layer_norm needs rows of width >= 2")]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]));
        tape.layer_norm(x, LAYER_NORM_EPS);
    }

    #[test]
    fn softmax_rows_properties() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]));
        let y = tape.softmax_rows(x);
        assert_close(tape.value(y), &[1.0 / 3.0; 3], 1e-15);

        // One dominant logit saturates.
        let x2 = tape.constant(&Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]));
        let y2 = tape.softmax_rows(x2);
        assert!(tape.value(y2)[0] > 1.0 - 1e-12);

        // Shift invariance, exactly: max subtraction cancels the shift.
        let x3 = tape.constant(&Tensor::new(&[1, 4], vec![0.1, -0.4, 2.2, 0.9]));
        let c = tape.constant(&Tensor::new(&[1, 4], vec![123.5; 4]));
        let x3s = tape.add(x3, c);
        let y3 = tape.softmax_rows(x3);
        let y3s = tape.softmax_rows(x3s);
        let a = tape.value(y3).to_vec();
        let b = tape.value(y3s).to_vec();
        assert_close(&a, &b, 1e-12);
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).data(), &[1.0; 4]);
    }

    #[test]
    fn elementwise_square_backward() {
        let mut tape = Tape::new();
        let t = Tensor::new(&[1, 3], vec![1.0, -2.0, 3.0]);
        let x = tape.leaf(&t);
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_close(grads.get(x).data(), &[2.0, -4.0, 6.0], 1e-15);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1, 2], vec![1.0, 2.0]));
        let unused = tape.leaf(&Tensor::new(&[1, 2], vec![3.0, 4.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.gather_rows(x, &[0, 0, 1]);
        assert_eq!(tape.shape(y), &[3, 2]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&Tensor::new(&[2, 1], vec![5.0, 6.0]));
        let c = tape.concat_cols(a, b);
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = tape.slice_cols(c, 0, 2);
        let b2 = tape.slice_cols(c, 2, 1);
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));

        let r = tape.concat_rows(a, a);
        assert_eq!(tape.shape(r), &[4, 2]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = tape.transpose(a);
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = tape.transpose(t);
        assert_eq!(tape.value(tt), tape.value(a));
    }

    #[test]
    fn add_bias_row_broadcast_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&Tensor::new(&[2], vec![10.0, 20.0]));
        let y = tape.add_bias_row(x, b);
        assert_eq!(tape.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(b).data(), &[2.0, 2.0]);
        assert_eq!(grads.get(x).data(), &[1.0; 4]);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0, -1.0, 0.0, 0.5, 20.0] {
            let naive = (1.0 + f64::exp(x)).ln();
            assert!((softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
        // Large inputs neither overflow nor lose the asymptote.
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
    }
}
